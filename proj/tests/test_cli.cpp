#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "ddg/cli.hpp"

using namespace ddg;
namespace fs = std::filesystem;

namespace {

struct Out {
    int code;
    std::string out, err;
};

Out run(std::vector<std::string> args) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    return {code, o.str(), e.str()};
}

std::string value(const std::string& summary, const std::string& key) {
    std::istringstream is(summary);
    for (std::string line; std::getline(is, line);)
        if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
    return "<missing>";
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() / ("ddg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        ExperimentConfig c;
        c.dataset.samples_per_cell = 2;
        c.dataset.image_size = 16;
        c.network.widths = {4, 8};
        c.network.blocks_per_stage = 1;
        c.training.epochs = 2;
        c.training.batch_size = 6;
        c.target_domain = 2;
        c.seeds = {3};
        config = (dir / "tiny.cfg").string();
        write_file_bytes(config, c.to_text());
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string out_dir() const { return dir.string(); }

    fs::path dir;
    std::string config;
};

} // namespace

TEST_F(Cli, GenDataWritesLoadableDataset) {
    const auto r = run({"gen-data", "--config", config, "--out-dir", out_dir()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "status"), "ok");
    EXPECT_EQ(value(r.out, "num_samples"), std::to_string(4 * 5 * 2));
    const auto loaded = load_dataset((dir / "dataset").string());
    EXPECT_EQ(hex64(loaded.data.content_hash()), value(r.out, "content_hash"));
}

TEST_F(Cli, TrainEvalAndExports) {
    auto r = run({"train", "--config", config, "--out-dir", out_dir()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "runs"), "1");
    EXPECT_EQ(value(r.out, "target_domain"), "2");
    ASSERT_TRUE(fs::exists(dir / "run_seed3.txt"));
    ASSERT_TRUE(fs::exists(dir / "checkpoint_seed3.ddgt"));
    const std::string acc = value(r.out, "accuracy_mean");

    r = run({"eval", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "accuracy"), acc);
    EXPECT_EQ(value(r.out, "epoch"), "2");

    r = run({"export-kmm", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir(), "--probe-samples", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "mode"), "dynamic");
    const std::string kmm1 = read_file_bytes((dir / "kmm.csv").string());
    EXPECT_TRUE(fs::exists(dir / "kmm_aggregate.pgm"));

    r = run({"export-coeffs", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir(), "--blocks", "0,1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "rows"), std::to_string(40 * 2));
    const std::string co1 = read_file_bytes((dir / "coefficients.csv").string());

    // a second identical run reproduces every exported byte
    r = run({"train", "--config", config, "--out-dir", out_dir()});
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(value(r.out, "accuracy_mean"), acc);
    ASSERT_EQ(run({"export-kmm", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir(), "--probe-samples", "4"}).code, 0);
    ASSERT_EQ(run({"export-coeffs", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir(), "--blocks", "0,1"}).code, 0);
    EXPECT_EQ(read_file_bytes((dir / "kmm.csv").string()), kmm1);
    EXPECT_EQ(read_file_bytes((dir / "coefficients.csv").string()), co1);
}

TEST_F(Cli, SeedAndTargetOverrides) {
    const auto r = run({"train", "--config", config, "--out-dir", out_dir(), "--seed", "9", "--target-domain", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "target_domain"), "0");
    EXPECT_TRUE(fs::exists(dir / "run_seed9.txt"));
}

TEST_F(Cli, ErrorsMapToExitCodes) {
    EXPECT_EQ(run({}).code, 1);
    EXPECT_EQ(run({"fly"}).code, 1);
    EXPECT_EQ(run({"train", "--bogus"}).code, 1);
    EXPECT_EQ(run({"train", "--config", (dir / "missing.cfg").string()}).code, 1);
    write_file_bytes((dir / "bad.cfg").string(), "[network]\nvariant = diagonal\n");
    const auto bad = run({"train", "--config", (dir / "bad.cfg").string(), "--out-dir", out_dir()});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("diagonal"), std::string::npos);
    EXPECT_EQ(run({"train", "--config", config, "--out-dir", out_dir(), "--target-domain", "7"}).code, 1);
    write_file_bytes((dir / "junk.ddgt").string(), "not a checkpoint");
    EXPECT_EQ(run({"eval", "--checkpoint", "junk.ddgt", "--out-dir", out_dir()}).code, 1);
    EXPECT_EQ(run({"eval", "--checkpoint", "absent.ddgt", "--out-dir", out_dir()}).code, 1);
    EXPECT_EQ(run({"train", "--help"}).code, 0);
}

TEST_F(Cli, StaticCheckpointCoefficientsRejected) {
    ExperimentConfig c = ExperimentConfig::load(config);
    c.network.variant = Variant::static_baseline;
    write_file_bytes(config, c.to_text());
    ASSERT_EQ(run({"train", "--config", config, "--out-dir", out_dir()}).code, 0);
    EXPECT_EQ(run({"export-coeffs", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir()}).code, 1);
    const auto r = run({"export-kmm", "--checkpoint", "checkpoint_seed3.ddgt", "--out-dir", out_dir()});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(value(r.out, "mode"), "static");
}
