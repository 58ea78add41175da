// qgait command-line driver. Every subcommand writes only under its output
// location and stamps each artifact with the config hash and seed.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qgait/checkpoint.hpp"
#include "qgait/config.hpp"
#include "qgait/intinfer.hpp"
#include "qgait/metrics.hpp"
#include "qgait/theory.hpp"
#include "qgait/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qgait;

namespace {

struct Stamp {
  std::string hash;
  std::uint64_t seed = 0;

  std::string comment() const { return "config_hash=" + hash + " seed=" + std::to_string(seed); }
};

Stamp stamp_of(const RunConfig& c) { return {config_hash(c), c.seed}; }

Stamp stamp_of(const json& provenance) {
  Stamp s;
  s.hash = provenance.value("config_hash", std::string("unknown"));
  s.seed = provenance.value("seed", std::uint64_t{0});
  return s;
}

json provenance(const RunConfig& c, const std::string& stage, const json& extra = json::object()) {
  json p = {{"config_hash", config_hash(c)}, {"seed", c.seed}, {"stage", stage}, {"config", run_config_to_json(c)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) p[it.key()] = it.value();
  return p;
}

fs::path out_dir(const RunConfig& c, const std::string& override_dir) {
  fs::path d = override_dir.empty() ? fs::path(c.out) : fs::path(override_dir);
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw IoError("cannot create " + d.string() + ": " + ec.message());
  return d;
}

void ensure_parent(const std::string& file) {
  const auto parent = fs::path(file).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());
}

void write_json(const std::string& path, const json& j) {
  ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path);
}

// Training data: a saved dataset if given (it must match the config), else
// regenerated from the config, which is deterministic.
DatasetSplit training_data(const RunConfig& c, const std::string& data_dir) {
  if (data_dir.empty()) return generate_dataset(c.data);
  DatasetSplit d = load_dataset(data_dir);
  if (dataset_config_to_json(d.config) != dataset_config_to_json(c.data)) {
    throw ConfigError("dataset in " + data_dir + " was generated with a different data config");
  }
  return d;
}

ModelSpec spec_of(const RunConfig& c) { return c.model; }

void check_spec(const Model& m, const RunConfig& c, const std::string& what) {
  if (!(m.spec() == spec_of(c))) throw ConfigError(what + " architecture does not match the config");
}

std::vector<double> parse_k_list(const std::string& s) {
  std::vector<double> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double k = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      ks.push_back(k);
    } catch (const std::exception&) {
      throw ConfigError("bad k value '" + item + "'");
    }
  }
  if (ks.empty()) throw ConfigError("--k needs at least one value");
  for (double k : ks) {
    if (!(k >= 1.0)) throw ConfigError("k values must be >= 1");
  }
  return ks;
}

int frames_of(const json& prov, int fallback) {
  if (prov.contains("config") && prov["config"].contains("data")) {
    return prov["config"]["data"].value("frames", fallback);
  }
  return fallback;
}

void print_cost_table(std::ostream& os, const std::vector<LayerCostSpec>& rows, const Stamp& st) {
  os << "# " << st.comment() << '\n';
  os << "layer,C_in,C_out,F,N,H,W,b_w,b_a,bitops,bitops_g\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.C_in << ',' << r.C_out << ',' << r.F << ',' << r.N << ',' << r.H << ',' << r.W << ','
       << r.b_w << ',' << r.b_a << ',' << std::setprecision(17) << r.bitops() << ',' << std::fixed
       << std::setprecision(2) << to_giga(r.bitops()) << std::defaultfloat << '\n';
  }
  const double total = bitops(rows);
  os << "total,,,,,,,,," << std::setprecision(17) << total << ',' << std::fixed << std::setprecision(2)
     << to_giga(total) << std::defaultfloat << '\n';
}

void write_embeddings(const std::string& path, const DatasetSplit& data, const std::vector<std::size_t>& idx,
                      const EmbeddingSet& e, const Stamp& st) {
  ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "# " << st.comment() << '\n' << "identity,seq_id,split";
  for (Eigen::Index k = 0; k < e.X.cols(); ++k) os << ",e" << k;
  os << '\n' << std::setprecision(17);
  const std::size_t n_gallery = data.gallery.size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = data.sequences.at(idx[i]);
    os << s.identity << ',' << s.seq_id << ',' << (i < n_gallery ? "gallery" : "probe");
    for (Eigen::Index k = 0; k < e.X.cols(); ++k) os << ',' << e.X(static_cast<Eigen::Index>(i), k);
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"qgait: quantization-aware training toolkit for gait embeddings"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, ckpt, init_ckpt, student, teacher, lowered_path, k_list = "2,5";
  std::string timing_out;
  double kmin = 1.0, kmax = 10.0;
  int n_points = 50, frames = 0, repetitions = 20;
  long iters = 0;
  bool verify = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic silhouette dataset");
  gen->add_option("--config", config_path, "run config (JSON)")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "stage-1 straight-through training");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir, "dataset directory (default: regenerate from config)");
  train->add_option("--init", init_ckpt, "full-precision checkpoint to initialize from");
  train->add_option("--out", out, "output directory (default: config out)");

  auto* fine = app.add_subcommand("finetune", "stage-2 soft-quantizer fine-tuning");
  fine->add_option("--config", config_path)->required();
  fine->add_option("--from", ckpt, "stage-1 checkpoint")->required();
  fine->add_option("--data", data_dir);
  fine->add_option("--out", out);

  auto* calib = app.add_subcommand("calibrate", "distillation fine-tune against a frozen teacher");
  calib->add_option("--config", config_path)->required();
  calib->add_option("--student", student)->required();
  calib->add_option("--teacher", teacher)->required();
  calib->add_option("--data", data_dir);
  calib->add_option("--out", out);

  auto* eval = app.add_subcommand("eval", "retrieval metrics report");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out, "report JSON path")->required();

  auto* theory_cmd = app.add_subcommand("analyze-theory", "soft-quantizer gradient moment curves");
  theory_cmd->add_option("--kmin", kmin);
  theory_cmd->add_option("--kmax", kmax);
  theory_cmd->add_option("--n", n_points);
  theory_cmd->add_option("--out", out, "CSV path")->required();
  theory_cmd->add_flag("--verify", verify, "re-read the CSV and check every invariant");

  auto* bitops_cmd = app.add_subcommand("bitops", "per-layer BitOPs table (CSV on stdout)");
  bitops_cmd->add_option("--ckpt", ckpt)->required();
  bitops_cmd->add_option("--frames", frames, "frames per sample (default: from the checkpoint's config)");
  bitops_cmd->add_option("--out", out, "also write the table to this CSV");

  auto* contrast = app.add_subcommand("contrast-k", "STE vs fixed-k soft training from scratch");
  contrast->add_option("--config", config_path)->required();
  contrast->add_option("--k", k_list, "comma-separated k values");
  contrast->add_option("--iters", iters, "iterations per run (default: train.stage1_iters)");
  contrast->add_option("--data", data_dir);
  contrast->add_option("--out", out, "CSV path")->required();

  auto* emb = app.add_subcommand("export-embeddings", "gallery and probe embeddings as CSV");
  emb->add_option("--ckpt", ckpt)->required();
  emb->add_option("--data", data_dir)->required();
  emb->add_option("--out", out)->required();

  auto* lower_cmd = app.add_subcommand("lower", "convert a quantized checkpoint to integer form");
  lower_cmd->add_option("--ckpt", ckpt)->required();
  lower_cmd->add_option("--out", out)->required();

  auto* int_eval = app.add_subcommand("int-eval", "retrieval metrics through the integer path");
  int_eval->add_option("--lowered", lowered_path)->required();
  int_eval->add_option("--data", data_dir)->required();
  int_eval->add_option("--out", out, "report JSON path (default: stdout)");
  int_eval->add_option("--timing", timing_out, "per-layer timing CSV (not deterministic)");
  int_eval->add_option("--reps", repetitions, "timing repetitions (>= 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      const RunConfig c = load_run_config(config_path);
      const DatasetSplit d = generate_dataset(c.data);
      save_dataset(d, out, config_hash(c), c.seed);
      std::cout << "wrote " << d.sequences.size() << " sequences to " << out << '\n';
    } else if (*train) {
      const RunConfig c = load_run_config(config_path);
      const DatasetSplit d = training_data(c, data_dir);
      Model m;
      json extra = json::object();
      if (!init_ckpt.empty()) {
        Model fp = load_checkpoint(init_ckpt);
        if (fp.quantized()) throw ConfigError("--init expects a full-precision checkpoint");
        check_spec(fp, c, "--init");
        m = c.quant.full_precision() ? fp : make_quantized(fp, c.quant);
        extra["init"] = fs::path(init_ckpt).filename().string();
      } else {
        m = Model(spec_of(c), c.seed);
        if (!c.quant.full_precision()) m.quantize(c.quant);
      }
      m.set_soft_forward(c.soft_forward);
      const auto r = stage1_train(m, d, c.plan());
      const auto dir = out_dir(c, out);
      save_checkpoint((dir / "stage1.qgkt").string(), m, provenance(c, "stage1", extra));
      write_trace_csv((dir / "stage1_trace.csv").string(), r.trace, stamp_of(c).comment());
      std::cout << "stage1: " << r.steps << " steps, final loss " << r.trace.back().loss << '\n';
    } else if (*fine) {
      const RunConfig c = load_run_config(config_path);
      const DatasetSplit d = training_data(c, data_dir);
      Model m = load_checkpoint(ckpt);
      check_spec(m, c, "--from");
      m.set_soft_forward(c.soft_forward);
      const auto r = stage2_finetune(m, d, c.plan(), c.kschedule);
      const auto dir = out_dir(c, out);
      save_checkpoint((dir / "finetuned.qgkt").string(), m,
                      provenance(c, "finetune", {{"from", fs::path(ckpt).filename().string()}}));
      write_trace_csv((dir / "finetune_trace.csv").string(), r.trace, stamp_of(c).comment());
      std::cout << "finetune: " << r.steps << " steps, final loss " << r.trace.back().loss << '\n';
    } else if (*calib) {
      const RunConfig c = load_run_config(config_path);
      const DatasetSplit d = training_data(c, data_dir);
      Model s = load_checkpoint(student);
      Model t = load_checkpoint(teacher);
      check_spec(s, c, "student");
      s.set_soft_forward(c.soft_forward);
      const auto r = calibrate_with_idc(s, t, d, c.plan(), c.calibrate);
      const auto dir = out_dir(c, out);
      save_checkpoint((dir / "calibrated.qgkt").string(), s,
                      provenance(c, "calibrate",
                                 {{"student", fs::path(student).filename().string()},
                                  {"teacher", fs::path(teacher).filename().string()}}));
      write_trace_csv((dir / "calibrate_trace.csv").string(), r.trace, stamp_of(c).comment());
      std::cout << "calibrate: " << r.steps << " steps, final loss " << r.trace.back().loss << '\n';
    } else if (*eval) {
      json prov;
      Model m = load_checkpoint(ckpt, &prov);
      const DatasetSplit d = load_dataset(data_dir);
      json report = evaluate(m, d).to_json();
      const Stamp st = stamp_of(prov);
      report["config_hash"] = st.hash;
      report["seed"] = st.seed;
      write_json(out, report);
      std::cout << "rank1 " << report["rank1"].get<double>() << ", mAP " << report["mAP"].get<double>() << '\n';
    } else if (*theory_cmd) {
      ensure_parent(out);
      std::ostringstream cmt;
      cmt << std::setprecision(17) << "config_hash="
          << fnv1a64_hex(json({{"kmin", kmin}, {"kmax", kmax}, {"n", n_points}}).dump()) << " seed=0";
      theory::export_theory_curves(kmin, kmax, n_points, out, cmt.str());
      if (verify) {
        const auto check = theory::verify_theory_csv(out);
        for (const auto& f : check.failures) std::cerr << "verify: " << f << '\n';
        if (!check.ok) throw NumericError("theory invariants violated in " + out);
        std::cout << "verified " << check.rows << " rows\n";
      }
    } else if (*bitops_cmd) {
      json prov;
      const Model m = load_checkpoint(ckpt, &prov);
      const int n = frames > 0 ? frames : frames_of(prov, 8);
      const auto rows = model_cost_specs(m, n);
      print_cost_table(std::cout, rows, stamp_of(prov));
      if (!out.empty()) {
        ensure_parent(out);
        std::ofstream os(out);
        if (!os) throw IoError("cannot write " + out);
        print_cost_table(os, rows, stamp_of(prov));
      }
    } else if (*contrast) {
      const RunConfig c = load_run_config(config_path);
      const DatasetSplit d = training_data(c, data_dir);
      const auto ks = parse_k_list(k_list);
      const long n = iters > 0 ? iters : c.train.stage1_iters;
      const auto r = convergence_contrast(d, spec_of(c), c.quant, c.plan(), ks, n, c.seed);
      ensure_parent(out);
      write_contrast_csv(out, r, stamp_of(c).comment());
      std::cout << "STE final task loss " << final_task_loss(r.ste, 50) << '\n';
      for (std::size_t i = 0; i < ks.size(); ++i) {
        std::cout << "k=" << ks[i] << " final task loss " << final_task_loss(r.soft[i], 50) << '\n';
      }
    } else if (*emb) {
      json prov;
      Model m = load_checkpoint(ckpt, &prov);
      const DatasetSplit d = load_dataset(data_dir);
      std::vector<std::size_t> idx = d.gallery;
      idx.insert(idx.end(), d.probe.begin(), d.probe.end());
      write_embeddings(out, d, idx, compute_embeddings(m, d, idx), stamp_of(prov));
    } else if (*lower_cmd) {
      json prov;
      const Model m = load_checkpoint(ckpt, &prov);
      const LoweredModel lm = lower(m);
      ensure_parent(out);
      prov["lowered_from"] = fs::path(ckpt).filename().string();
      save_lowered(out, lm, prov);
    } else if (*int_eval) {
      json prov;
      const LoweredModel lm = load_lowered(lowered_path, &prov);
      const DatasetSplit d = load_dataset(data_dir);
      const EmbeddingSet g = int_embeddings(lm, d, d.gallery);
      const EmbeddingSet p = int_embeddings(lm, d, d.probe);
      const auto res = retrieve(p, g, 10);
      const Stamp st = stamp_of(prov);
      json report = {{"rank1", res.rank[0]}, {"rank5", res.rank[4]}, {"rank10", res.rank[9]},
                     {"mAP", res.mAP},       {"mINP", res.mINP},       {"probes", res.evaluated},
                     {"gallery", g.X.rows()}, {"excluded_probes", res.excluded},
                     {"config_hash", st.hash}, {"seed", st.seed}};
      if (out.empty()) {
        std::cout << report.dump(2) << '\n';
      } else {
        write_json(out, report);
      }
      if (!timing_out.empty()) {
        std::vector<std::size_t> idx(d.probe.begin(), d.probe.begin() + std::min<std::size_t>(8, d.probe.size()));
        const auto rows = timing_report(lm, make_batch(d, idx), repetitions);
        ensure_parent(timing_out);
        write_timing_csv(timing_out, rows, st.comment());
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
