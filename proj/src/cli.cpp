#include "se2/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <atomic>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <thread>

#include "se2/audit.hpp"
#include "se2/group.hpp"
#include "se2/model.hpp"
#include "se2/tensor_io.hpp"
#include "se2/training.hpp"

namespace se2::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Refuses to clobber existing outputs unless --force was given.
void claim_output(const fs::path& path, bool force) {
  if (!fs::exists(path)) return;
  if (!force)
    throw ConfigError("output " + path.string() + " already exists; pass --force to overwrite");
  fs::remove_all(path);
}

void require_exists(const fs::path& path, const char* what) {
  if (!fs::exists(path))
    throw ConfigError(std::string(what) + " not found: " + path.string());
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct GlobalOpts {
  std::uint64_t seed = 0;
  int workers = 1;
  bool f64 = false;
  bool force = false;
};

void add_globals(CLI::App* cmd, GlobalOpts* g) {
  cmd->add_option("--seed", g->seed, "RNG seed for every stochastic choice");
  cmd->add_option("--workers", g->workers, "parallel workers for audit loops (default 1)")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--f64", g->f64, "run model math in 64-bit (gradient-check precision mode)");
  cmd->add_flag("--force", g->force, "overwrite existing --out artifacts");
}

int run_synth(const std::string& task, std::uint64_t seed, int n_train, int n_val, int n_test,
              int size, const fs::path& out, bool force) {
  claim_output(out, force);
  SynthSpec spec;
  spec.seed = seed;
  spec.size = size;
  spec.segmentation = task == "seg";
  const struct {
    const char* name;
    int n;
    std::uint64_t salt;
  } splits[] = {{"train", n_train, 0x7221u}, {"val", n_val, 0x7A1u}, {"test", n_test, 0x7E57u}};
  for (const auto& s : splits) {
    SynthSpec sp = spec;
    sp.n_per_class = s.n;
    sp.seed = seed ^ s.salt;
    synth_dataset(sp, out / s.name);
  }
  std::cout << "wrote " << out.string() << " (train " << n_train << ", val " << n_val
            << ", test " << n_test << " per class)\n";
  return 0;
}

int run_params(const std::string& task, int n, bool table_match) {
  auto model = Model::build(preset_config(task, n, table_match), 0);
  for (const auto& row : model.param_breakdown())
    std::cout << row.name << " " << row.count << "\n";
  std::cout << "total " << model.param_total() << "\n";
  return 0;
}

template <class T>
int run_train(const std::string& task, int n, bool table_match, const fs::path& data,
              const fs::path& out, TrainConfig cfg, bool force) {
  require_exists(data / "train" / "manifest.csv", "training split");
  require_exists(data / "val" / "manifest.csv", "validation split");
  claim_output(out, force);
  auto train_set = load_dataset(data / "train");
  auto val_set = load_dataset(data / "val");
  auto model = ModelT<T>::build(preset_config(task, n, table_match), cfg.seed);
  auto result = train(model, train_set, val_set, cfg, out);
  for (const auto& e : result.history)
    std::cout << "epoch " << e.epoch << " train_loss " << fmt6(e.train_loss) << " val_loss "
              << fmt6(e.val_loss) << " val_metric " << fmt6(e.val_metric) << " lr " << fmt6(e.lr)
              << "\n";
  std::cout << "best epoch " << result.best_epoch << " val_loss " << fmt6(result.best_val_loss)
            << "\n";
  return 0;
}

template <class T>
int run_eval(const fs::path& model_dir, const fs::path& data, const fs::path& out, bool force) {
  require_exists(model_dir / "manifest.txt", "checkpoint");
  require_exists(data / "manifest.csv", "dataset");
  auto model = ModelT<T>::load(model_dir);
  auto ds = load_dataset(data);
  const double acc = evaluate_accuracy(model, ds);
  std::cout << "accuracy " << fmt6(acc) << "\n";
  if (!out.empty()) {
    claim_output(out, force);
    json j{{"accuracy", acc}, {"samples", ds.samples.size()}};
    std::ofstream os(out, std::ios::binary);
    os << j.dump(2) << "\n";
  }
  return 0;
}

// Runs fn(worker, i) over [0, count); results land in caller-owned slots
// so the output order stays deterministic regardless of scheduling.
void parallel_for(int count, int workers, const std::function<void(int, int)>& fn) {
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(w, i);
    });
  for (auto& t : pool) t.join();
}

template <class T>
int run_polar(const fs::path& model_dir, const fs::path& data, int steps, int limit,
              const fs::path& out, int workers, bool force) {
  require_exists(model_dir / "manifest.txt", "checkpoint");
  require_exists(data / "manifest.csv", "dataset");
  claim_output(out, force);
  auto ds = load_dataset(data);
  const int count = limit > 0 ? std::min<int>(limit, static_cast<int>(ds.samples.size()))
                              : static_cast<int>(ds.samples.size());
  std::vector<std::vector<double>> responses(static_cast<std::size_t>(count));
  std::vector<ModelT<T>> models;
  for (int w = 0; w < std::max(workers, 1); ++w) models.push_back(ModelT<T>::load(model_dir));
  parallel_for(count, workers, [&](int w, int i) {
    auto img = ds.load_patch(static_cast<std::size_t>(i)).template cast<T>();
    responses[static_cast<std::size_t>(i)] =
        polar_response(models[static_cast<std::size_t>(w)], img, steps);
  });
  std::ofstream os(out, std::ios::binary);
  if (!os) throw DataError("cannot write " + out.string());
  os << "sample_id,k,angle_rad,prediction\n";
  for (int i = 0; i < count; ++i)
    for (int k = 0; k < steps; ++k)
      os << i << "," << k << "," << fmt6(kTwoPi * k / steps) << ","
         << fmt6(responses[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) << "\n";
  std::cout << "wrote " << out.string() << " (" << count << " samples x " << steps
            << " angles)\n";
  return 0;
}

template <class T>
int run_equiv(const fs::path& model_dir, const fs::path& data, int theta_index, int layer_prefix,
              int sample, int crop, bool with_pool, const fs::path& out, bool force) {
  require_exists(model_dir / "manifest.txt", "checkpoint");
  require_exists(data / "manifest.csv", "dataset");
  claim_output(out, force);
  auto model = ModelT<T>::load(model_dir);
  auto ds = load_dataset(data);
  if (sample < 0 || sample >= static_cast<int>(ds.samples.size()))
    throw ConfigError("sample index " + std::to_string(sample) + " outside dataset of " +
                      std::to_string(ds.samples.size()));
  auto img = ds.load_patch(static_cast<std::size_t>(sample)).template cast<T>();
  auto err = equivariance_error(model, img, theta_index, layer_prefix, crop, with_pool);
  json j{{"theta_index", theta_index},
         {"theta_rad", kTwoPi * theta_index / model.config.num_orientations},
         {"layer_prefix", layer_prefix},
         {"crop", crop},
         {"sample", sample},
         {"max_abs", err.max_abs},
         {"mean_abs", err.mean_abs}};
  std::ofstream os(out, std::ios::binary);
  if (!os) throw DataError("cannot write " + out.string());
  os << j.dump(2) << "\n";
  std::cout << "max_abs " << fmt6(err.max_abs) << " mean_abs " << fmt6(err.mean_abs) << "\n";
  return 0;
}

template <class T>
int run_align_stats(const fs::path& model_dir, const fs::path& data, int steps, int limit,
                    const fs::path& out, int workers, bool force) {
  require_exists(model_dir / "manifest.txt", "checkpoint");
  require_exists(data / "manifest.csv", "dataset");
  claim_output(out, force);
  fs::create_directories(out);
  auto ds = load_dataset(data);
  const int count = limit > 0 ? std::min<int>(limit, static_cast<int>(ds.samples.size()))
                              : static_cast<int>(ds.samples.size());
  std::vector<AlignedStats<T>> all(static_cast<std::size_t>(count));
  std::vector<ModelT<T>> models;
  for (int w = 0; w < std::max(workers, 1); ++w) models.push_back(ModelT<T>::load(model_dir));
  parallel_for(count, workers, [&](int w, int i) {
    auto img = ds.load_patch(static_cast<std::size_t>(i)).template cast<T>();
    all[static_cast<std::size_t>(i)] =
        aligned_prediction_stats(models[static_cast<std::size_t>(w)], img, steps);
  });
  std::ofstream os(out / "summary.csv", std::ios::binary);
  os << "sample_id,mean_std,max_std\n";
  for (int i = 0; i < count; ++i) {
    const auto& st = all[static_cast<std::size_t>(i)];
    char name[64];
    std::snprintf(name, sizeof(name), "%05d_mean.se2t", i);
    write_se2t(out / name, st.mean_map);
    std::snprintf(name, sizeof(name), "%05d_std.se2t", i);
    write_se2t(out / name, st.std_map);
    os << i << "," << fmt6(st.mean_std) << "," << fmt6(st.max_std) << "\n";
  }
  std::cout << "wrote " << (out / "summary.csv").string() << " (" << count << " samples)\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"SE(2,N) group-equivariant CNN toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_task = "cls";
  int n_train = 2000, n_val = 200, n_test = 500, size = 32;
  std::string synth_out;
  synth->add_option("--task", synth_task, "cls (oriented blob) or seg (3-class masks)")
      ->check(CLI::IsMember({"cls", "seg"}));
  synth->add_option("--n-train", n_train, "training samples per class")->check(CLI::PositiveNumber);
  synth->add_option("--n-val", n_val, "validation samples per class");
  synth->add_option("--n-test", n_test, "test samples per class");
  synth->add_option("--size", size, "square patch extent")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  add_globals(synth, &g);

  // params
  auto* params = app.add_subcommand("params", "print per-layer weight counts");
  std::string task = "mitosis";
  int n = 8;
  bool table_match = false;
  params->add_option("--task", task, "mitosis | nuclei | tumor | synth-cls")->required();
  params->add_option("--n", n, "orientation count (1, 4, 8, 16)")->required();
  params->add_flag("--table-match", table_match,
                   "strict table head for nuclei (per-class affine, 54 instead of 51)");
  add_globals(params, &g);

  // train
  auto* tr = app.add_subcommand("train", "train a preset on a dataset directory");
  std::string tr_task = "synth-cls", tr_data, tr_out;
  int tr_n = 8;
  bool tr_table = false;
  TrainConfig cfg;
  tr->add_option("--task", tr_task, "preset name")->required();
  tr->add_option("--n", tr_n, "orientation count")->required();
  tr->add_option("--data", tr_data, "dataset directory with train/ and val/")->required();
  tr->add_option("--out", tr_out, "output directory (history.csv, checkpoint/)")->required();
  tr->add_option("--epochs", cfg.epochs, "max epochs");
  tr->add_option("--batch", cfg.batch_size, "batch size");
  tr->add_option("--lr", cfg.lr, "initial learning rate");
  tr->add_option("--momentum", cfg.momentum, "SGD momentum");
  tr->add_option("--lr-decay", cfg.lr_decay_factor, "per-epoch lr factor");
  tr->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
  tr->add_option("--patience", cfg.patience, "early-stop patience (epochs)");
  tr->add_flag("--table-match", tr_table, "strict table head for nuclei");
  add_globals(tr, &g);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_model, ev_data, ev_out;
  ev->add_option("--model", ev_model, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset split directory (manifest.csv)")->required();
  ev->add_option("--out", ev_out, "optional metrics JSON");
  add_globals(ev, &g);

  // polar
  auto* po = app.add_subcommand("polar", "polar response curves over input rotations");
  std::string po_model, po_data, po_out;
  int steps = 16, po_limit = 0;
  po->add_option("--model", po_model, "checkpoint directory")->required();
  po->add_option("--data", po_data, "dataset split directory")->required();
  po->add_option("--steps", steps, "rotation steps per full turn");
  po->add_option("--limit", po_limit, "audit only the first K samples (0 = all)");
  po->add_option("--out", po_out, "output CSV")->required();
  add_globals(po, &g);

  // equiv
  auto* eq = app.add_subcommand("equiv", "layer-prefix equivariance error at a grid angle");
  std::string eq_model, eq_data, eq_out;
  int theta_index = 1, layer_prefix = 1, eq_sample = 0, eq_crop = 0;
  bool eq_pool = false;
  eq->add_option("--model", eq_model, "checkpoint directory")->required();
  eq->add_option("--data", eq_data, "dataset split directory")->required();
  eq->add_option("--theta-index", theta_index, "rotation index j (theta = 2 pi j / N)");
  eq->add_option("--layer-prefix", layer_prefix, "number of leading blocks to run");
  eq->add_option("--sample", eq_sample, "sample index");
  eq->add_option("--crop", eq_crop, "pixels to drop per output side");
  eq->add_flag("--with-pool", eq_pool, "include pooling layers (pi/2 multiples only)");
  eq->add_option("--out", eq_out, "output JSON")->required();
  add_globals(eq, &g);

  // align-stats
  auto* al = app.add_subcommand("align-stats", "re-aligned dense prediction mean/std maps");
  std::string al_model, al_data, al_out;
  int al_steps = 16, al_limit = 0;
  al->add_option("--model", al_model, "checkpoint directory")->required();
  al->add_option("--data", al_data, "dataset split directory")->required();
  al->add_option("--steps", al_steps, "rotation steps per full turn");
  al->add_option("--limit", al_limit, "audit only the first K samples (0 = all)");
  al->add_option("--out", al_out, "output directory")->required();
  add_globals(al, &g);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed())
      return run_synth(synth_task, g.seed, n_train, n_val, n_test, size, synth_out, g.force);
    if (params->parsed()) return run_params(task, n, table_match);
    if (tr->parsed()) {
      cfg.seed = g.seed;
      return g.f64 ? run_train<double>(tr_task, tr_n, tr_table, tr_data, tr_out, cfg, g.force)
                   : run_train<float>(tr_task, tr_n, tr_table, tr_data, tr_out, cfg, g.force);
    }
    if (ev->parsed())
      return g.f64 ? run_eval<double>(ev_model, ev_data, ev_out, g.force)
                   : run_eval<float>(ev_model, ev_data, ev_out, g.force);
    if (po->parsed())
      return g.f64 ? run_polar<double>(po_model, po_data, steps, po_limit, po_out, g.workers,
                                       g.force)
                   : run_polar<float>(po_model, po_data, steps, po_limit, po_out, g.workers,
                                      g.force);
    if (eq->parsed())
      return g.f64 ? run_equiv<double>(eq_model, eq_data, theta_index, layer_prefix, eq_sample,
                                       eq_crop, eq_pool, eq_out, g.force)
                   : run_equiv<float>(eq_model, eq_data, theta_index, layer_prefix, eq_sample,
                                      eq_crop, eq_pool, eq_out, g.force);
    if (al->parsed())
      return g.f64 ? run_align_stats<double>(al_model, al_data, al_steps, al_limit, al_out,
                                             g.workers, g.force)
                   : run_align_stats<float>(al_model, al_data, al_steps, al_limit, al_out,
                                            g.workers, g.force);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace se2::cli
