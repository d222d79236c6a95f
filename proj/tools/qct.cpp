// qct: generate / train / export / eval / compare.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence,
// 4 I/O or format error, 1 anything else.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "qct/checkpoint.hpp"
#include "qct/config.hpp"
#include "qct/packing.hpp"
#include "qct/taskdata.hpp"
#include "qct/trainer.hpp"

namespace fs = std::filesystem;
using namespace qct;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "Run configuration file");
  cmd->add_option("--set", o.overrides, "Override a setting: section.key=value")->take_all();
}

RunConfig load_config(const CommonOptions& o) {
  RunConfig rc;
  if (!o.config_path.empty()) rc.load_text(read_text_file(o.config_path));
  for (const auto& s : o.overrides) rc.apply_override(s);
  return rc;
}

int cmd_generate(const CommonOptions& o, const std::string& out) {
  RunConfig rc = load_config(o);
  if (!out.empty()) rc.data_dir = out;
  rc.resolve();
  const TaskData data = generate_dataset(rc.data);
  write_dataset(rc.data_dir, data);
  write_text_file(fs::path(rc.data_dir) / "config.resolved", rc.to_text());
  std::cout << "wrote " << data.train.size() + data.dev.size() + data.test.size() << " utterances ("
            << data.train.size() << " train, " << data.dev.size() << " dev, " << data.test.size() << " test) to "
            << rc.data_dir << '\n';
  return 0;
}

struct TrainFlags {
  std::optional<std::string> mode, scaling, run_dir, data_dir;
  std::optional<int> bits, cnn_bits, decoder_bits;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<bool> kl, sp;
};

int cmd_train(const CommonOptions& o, const TrainFlags& f) {
  RunConfig rc = load_config(o);
  if (f.mode) rc.train.mode = parse_mode(*f.mode);
  if (f.scaling) rc.train.scaling = parse_scaling(*f.scaling);
  if (f.bits) rc.train.bits = *f.bits;
  if (f.cnn_bits) rc.train.cnn_bits = *f.cnn_bits;
  if (f.decoder_bits) rc.train.decoder_bits = *f.decoder_bits;
  if (f.seed) rc.seed = *f.seed;
  if (f.epochs) rc.train.epochs = *f.epochs;
  if (f.kl) rc.train.enable_kl = *f.kl;
  if (f.sp) rc.train.enable_sp = *f.sp;
  if (f.run_dir) rc.run_dir = *f.run_dir;
  if (f.data_dir) rc.data_dir = *f.data_dir;
  rc.resolve();

  const Dataset train = read_split(rc.data_dir, "train");
  const Dataset dev = read_split(rc.data_dir, "dev");
  for (const Dataset* split : {&train, &dev}) {
    for (const auto& u : *split) {
      const bool tokens_ok = std::all_of(u.transcript.begin(), u.transcript.end(),
                                         [&](int t) { return t >= 0 && static_cast<std::size_t>(t) < rc.data.vocab; });
      if (u.features.cols() != rc.data.feature_dim || !tokens_ok) {
        throw ConfigError("dataset in " + rc.data_dir + " does not match the configured vocab/feature_dim");
      }
    }
  }
  const fs::path run(rc.run_dir);
  fs::create_directories(run);
  write_text_file(run / "config.resolved", rc.to_text());
  std::ofstream log(run / "train.log");
  if (!log) throw IoError("cannot write " + (run / "train.log").string());

  TrainResult r = train_model(rc, train, dev, &log);
  write_file(run / "checkpoint.qck", save_checkpoint(r.model, static_cast<std::uint64_t>(r.state.step)));
  for (const auto& m : r.history) {
    if (m.epoch != rc.train.epochs) continue;
    std::cout << "dev " << m.view << ": wer " << std::fixed << std::setprecision(2) << m.wer << "%, token acc "
              << std::setprecision(4) << m.token_accuracy << '\n';
  }
  std::cout << "checkpoint: " << (run / "checkpoint.qck").string() << '\n';
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& view, std::optional<int> cnn_bits,
               std::optional<int> decoder_bits, std::uint64_t seed, const std::string& out) {
  Checkpoint ck = load_checkpoint(read_file(checkpoint));
  // Bit-widths default to those the run was trained with.
  int cnn = 32, dec = 4;
  const fs::path resolved = fs::path(checkpoint).parent_path() / "config.resolved";
  if (fs::exists(resolved)) {
    const RunConfig rc = parse_run_config(read_text_file(resolved));
    cnn = rc.train.cnn_bits;
    dec = rc.train.decoder_bits;
  }
  if (cnn_bits) cnn = *cnn_bits;
  if (decoder_bits) dec = *decoder_bits;
  const NamedView v = parse_view(view, ck.model.config.num_blocks, cnn, dec, seed);
  v.assignment.validate(ck.model.config.num_blocks);
  std::vector<std::uint8_t> bytes;
  try {
    bytes = write_archive(ck.model, v.assignment, v.name);
  } catch (const AssignmentError& e) {
    throw ConfigError(std::string("view ") + v.name + " was not trained: " + e.what());
  }
  write_file(out, bytes);
  const CompressionReport rep = compression_report(ck.model, v.assignment);
  std::cout << "view:               " << v.name << '\n'
            << "archive:            " << out << " (" << bytes.size() << " bytes)\n"
            << "latent hash:        " << std::hex << std::setw(16) << std::setfill('0') << latent_hash(ck.model)
            << std::dec << std::setfill(' ') << '\n'
            << "float32 bytes:      " << rep.float_bytes << '\n'
            << "packed bytes:       " << rep.packed_bytes << '\n'
            << "compression ratio:  " << std::fixed << std::setprecision(2) << rep.ratio << "x\n"
            << "extra quant params: " << rep.extra_quant_params << '\n';
  return 0;
}

int cmd_eval(const std::string& archive, const std::string& data_dir, const std::string& split,
             const std::string& report_path) {
  const LoadedModel m = load_archive(read_archive(read_file(archive)));
  const Dataset data = read_split(data_dir, split);
  const EvalResult r = evaluate(m.model, data, latent_resolver());
  print_wer_table(std::cout, r.report, m.view.empty() ? "model" : m.view);
  if (!report_path.empty()) {
    std::ostringstream os;
    write_report_lines(os, r.report);
    write_text_file(report_path, os.str());
  }
  return 0;
}

int cmd_compare(const std::string& a, const std::string& b, double alpha) {
  std::istringstream sa(read_text_file(a)), sb(read_text_file(b));
  const WerReport ra = read_report_lines(sa), rb = read_report_lines(sb);
  const SignificanceResult s = compare_reports(ra, rb, alpha);
  std::cout << std::fixed << std::setprecision(2) << "A: wer " << ra.wer() << "%  B: wer " << rb.wer() << "%\n"
            << std::setprecision(4) << "Z = " << s.z << "  p = " << s.p_value << "  alpha = " << alpha << '\n'
            << (s.significant ? "significant" : "not significant") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization co-training toolkit"};
  app.require_subcommand(1);

  CommonOptions gen_opts;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset");
  add_common(gen, gen_opts);
  gen->add_option("-o,--out", gen_out, "Output directory (default: [run] data_dir)");

  CommonOptions train_opts;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, train_opts);
  train->add_option("--mode", tf.mode, "float | qat | cotrain");
  train->add_option("--bits", tf.bits, "Encoder bit-width for --mode qat");
  train->add_option("--cnn-bits", tf.cnn_bits, "Convolution-module bit-width (1, 2, 4, 8, 32)");
  train->add_option("--decoder-bits", tf.decoder_bits, "Decoder bit-width");
  train->add_option("--scaling", tf.scaling, "learned | absmean-fixed");
  train->add_flag("--kl,!--no-kl", tf.kl, "KL regularization in co-training");
  train->add_flag("--sp,!--no-sp", tf.sp, "Stochastic precision view in co-training");
  train->add_option("--seed", tf.seed, "Run seed");
  train->add_option("--epochs", tf.epochs, "Training epochs");
  train->add_option("--run-dir", tf.run_dir, "Output directory");
  train->add_option("--data-dir", tf.data_dir, "Dataset directory");

  std::string ck_path, view = "int2", export_out;
  std::optional<int> ex_cnn, ex_dec;
  std::uint64_t ex_seed = 1;
  auto* exp = app.add_subcommand("export", "Pack one precision view of a checkpoint");
  exp->add_option("checkpoint", ck_path, "Checkpoint file")->required();
  exp->add_option("--view", view, "float | int1 | int2 | int4 | int8 | half");
  exp->add_option("--cnn-bits", ex_cnn, "Override the convolution-module bit-width");
  exp->add_option("--decoder-bits", ex_dec, "Override the decoder bit-width");
  exp->add_option("--seed", ex_seed, "Seed for the half view");
  exp->add_option("-o,--out", export_out, "Archive path")->required();

  std::string archive, data_dir = "data", split = "test", report;
  auto* ev = app.add_subcommand("eval", "Greedy-decode a split with an archive and score WER");
  ev->add_option("archive", archive, "Model archive")->required();
  ev->add_option("--data", data_dir, "Dataset directory");
  ev->add_option("--split", split, "train | dev | test");
  ev->add_option("--report", report, "Write per-utterance report lines here");

  std::string rep_a, rep_b;
  double alpha = 0.05;
  auto* cmp = app.add_subcommand("compare", "Matched-pairs significance test between two reports");
  cmp->add_option("report_a", rep_a)->required();
  cmp->add_option("report_b", rep_b)->required();
  cmp->add_option("--alpha", alpha, "Significance level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(gen_opts, gen_out);
    if (*train) return cmd_train(train_opts, tf);
    if (*exp) return cmd_export(ck_path, view, ex_cnn, ex_dec, ex_seed, export_out);
    if (*ev) return cmd_eval(archive, data_dir, split, report);
    if (*cmp) return cmd_compare(rep_a, rep_b, alpha);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
