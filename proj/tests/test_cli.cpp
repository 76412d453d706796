// End-to-end runs of the command-line tool.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "maladv/config.hpp"
#include "maladv/store.hpp"
#include "test_util.hpp"

using namespace maladv;
using maladv::test::TempDir;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MALADV_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small architecture so training in a subprocess stays fast.
constexpr const char* kHyper = "max-len=2048\nembed-dim=4\nkernel-size=32\nstride=32\nnum-filters=16\nhidden-units=8\n";

class Cli : public ::testing::Test {
 protected:
  TempDir dir{"cli"};
  fs::path log() const { return dir / "log.txt"; }
  std::string out() const { return read_text(log()); }

  fs::path gen(const std::string& sub, const std::string& extra = "") {
    EXPECT_EQ(run("--seed 4 --out-dir " + q(dir / sub) + " gen-corpus --count 80 --max-sections 2 --max-payload 300 " +
                      extra,
                  log()),
              0)
        << out();
    return dir / sub / "corpus" / "manifest.csv";
  }

  fs::path trained(const fs::path& manifest, const std::string& sub, std::uint64_t seed = 4) {
    write_text(dir / "hyper.cfg", kHyper);
    EXPECT_EQ(run("--seed " + std::to_string(seed) + " --out-dir " + q(dir / sub) + " train --manifest " +
                      q(manifest) + " --hyper " + q(dir / "hyper.cfg") + " --epochs 6 --batch-size 8",
                  log()),
              0)
        << out();
    return dir / sub / "model.ckpt";
  }
};

}  // namespace

TEST_F(Cli, GenCorpusCountAndLabels) {
  ASSERT_EQ(run("--out-dir " + q(dir / "a") + " gen-corpus --count 100", log()), 0) << out();
  const auto m = read_manifest(dir / "a/corpus/manifest.csv");
  EXPECT_EQ(m.records.size(), 100u);
  ASSERT_EQ(run("--out-dir " + q(dir / "b") + " gen-corpus --count 30 --malware-frac 0", log()), 0) << out();
  for (const auto& r : read_manifest(dir / "b/corpus/manifest.csv").records) EXPECT_EQ(r.label, Label::benign);
}

TEST_F(Cli, GenCorpusIsReproducible) {
  const auto a = gen("a");
  const auto b = gen("b");
  EXPECT_EQ(read_text(a), read_text(b));
  // The effective record regenerates the same corpus.
  ASSERT_EQ(run("--config " + q(dir / "a/gen-corpus.config") + " --out-dir " + q(dir / "c") + " gen-corpus --out " +
                    q(dir / "c/corpus"),
                log()),
            0)
      << out();
  EXPECT_EQ(read_text(dir / "c/corpus/manifest.csv"), read_text(a));
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("", log()), 1);
  EXPECT_EQ(run("no-such-command", log()), 1);
  EXPECT_EQ(run("gen-corpus --count abc", log()), 1);
  const auto manifest = gen("g");
  EXPECT_EQ(run("--out-dir " + q(dir / "t") + " train --manifest " + q(manifest) + " --epochs 0", log()), 1);
  EXPECT_NE(out().find("epochs"), std::string::npos);
  write_text(dir / "bad.cfg", "learning-rat=0.1\n");
  EXPECT_EQ(run("--out-dir " + q(dir / "t") + " train --manifest " + q(manifest) + " --train-cfg " + q(dir / "bad.cfg"),
                log()),
            1);
  EXPECT_NE(out().find("learning-rat"), std::string::npos);
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("--out-dir " + q(dir / "t") + " train --manifest " + q(dir / "missing.csv"), log()), 2);
  write_text(dir / "junk.ckpt", "not a checkpoint at all");
  const auto manifest = gen("g");
  EXPECT_EQ(run("--out-dir " + q(dir / "t") + " attack --ckpt " + q(dir / "junk.ckpt") + " --manifest " +
                    q(manifest) + " --attack fgm_append",
                log()),
            2);
}

TEST_F(Cli, PipelineAttackPoolingTransfer) {
  const auto manifest = gen("g");
  const auto ckpt = trained(manifest, "m");
  EXPECT_TRUE(fs::exists(dir / "m/train_log.csv"));
  EXPECT_EQ(detail::read_lines(dir / "m/train_log.csv").size(), 7u);
  const auto model = load_checkpoint(ckpt);
  EXPECT_EQ(model.hyper.max_len, 2048u);
  EXPECT_EQ(model.hyper.seed, 4u);

  const std::string attack = "--seed 2 --out-dir " + q(dir / "atk") + " attack --ckpt " + q(ckpt) + " --manifest " +
                             q(manifest) + " --attack fgm_append,slack_fgm --budgets 50,100 --eps-ball 0,inf" +
                             " --candidates 5 --max-file-size 2048";
  ASSERT_EQ(run(attack, log()), 0) << out();
  const auto report = read_report(dir / "atk/report.csv");
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_EQ(report.rows[0].budget, 50u);
  EXPECT_EQ(report.rows[1].budget, 100u);
  EXPECT_EQ(report.rows[2].eps_ball, 0.0);
  EXPECT_TRUE(std::isinf(report.rows[3].eps_ball));
  EXPECT_EQ(report.rows[0].model_id, "model");
  EXPECT_TRUE(fs::exists(dir / "atk/outcomes.csv"));
  EXPECT_TRUE(fs::exists(dir / "atk/candidates.csv"));

  // Rerun from the effective record reproduces the report byte for byte.
  ASSERT_EQ(run("--config " + q(dir / "atk/attack.config") + " --out-dir " + q(dir / "atk2") + " attack --out " +
                    q(dir / "atk2/report.csv"),
                log()),
            0)
      << out();
  EXPECT_EQ(read_text(dir / "atk2/report.csv"), read_text(dir / "atk/report.csv"));

  EXPECT_EQ(run("--out-dir " + q(dir / "atk3") + " attack --ckpt " + q(ckpt) + " --manifest " + q(manifest) +
                    " --attack fgm_apend",
                log()),
            1);
  EXPECT_NE(out().find("expected one of"), std::string::npos);

  ASSERT_EQ(run("--out-dir " + q(dir / "pool") + " analyze-pooling --ckpt " + q(ckpt) + " --manifest " + q(manifest) +
                    " --samples 20",
                log()),
            0)
      << out();
  EXPECT_TRUE(fs::exists(dir / "pool/pooling_cdf.csv"));
  EXPECT_EQ(run("--out-dir " + q(dir / "pool") + " analyze-pooling --ckpt " + q(ckpt) + " --manifest " + q(manifest) +
                    " --samples 1",
                log()),
            1);

  ASSERT_EQ(run("--out-dir " + q(dir / "tr") + " transfer --source-ckpt " + q(ckpt) + " --target-ckpt " + q(ckpt) +
                    " --manifest " + q(manifest) + " --attack fgm_append --candidates 5 --max-file-size 2048",
                log()),
            0)
      << out();
  const auto lines = detail::read_lines(dir / "tr/transfer.csv");
  ASSERT_EQ(lines.size(), 2u);

  // A checkpoint with a different input contract cannot be a transfer target.
  write_text(dir / "small.cfg", "max-len=512\nembed-dim=4\nkernel-size=32\nstride=32\nnum-filters=16\nhidden-units=8\n");
  ASSERT_EQ(run("--out-dir " + q(dir / "m2") + " train --manifest " + q(manifest) + " --hyper " + q(dir / "small.cfg") +
                    " --epochs 1",
                log()),
            0)
      << out();
  EXPECT_EQ(run("--out-dir " + q(dir / "tr") + " transfer --source-ckpt " + q(ckpt) + " --target-ckpt " +
                    q(dir / "m2/model.ckpt") + " --manifest " + q(manifest) + " --attack fgm_append",
                log()),
            2);
}

TEST_F(Cli, TrainingIsReproducibleAndFlagsOverrideFiles) {
  const auto manifest = gen("g");
  const auto a = trained(manifest, "a");
  const auto b = trained(manifest, "b");
  EXPECT_EQ(read_text(a), read_text(b));
  const auto record = read_key_values(dir / "a/train.config");
  EXPECT_EQ(record.at("epochs"), "6");
  EXPECT_EQ(record.at("num-filters"), "16");
  EXPECT_EQ(record.at("hyper"), "");
  // Retraining from the record alone gives the same checkpoint.
  ASSERT_EQ(run("--config " + q(dir / "a/train.config") + " --out-dir " + q(dir / "c") + " train --out " +
                    q(dir / "c/model.ckpt"),
                log()),
            0)
      << out();
  EXPECT_EQ(read_text(dir / "c/model.ckpt"), read_text(a));
}
