#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bineye/elf.hpp"
#include "bineye/random.hpp"
#include "support/elf_builder.hpp"

using namespace bineye;
using namespace bineye::testing;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli {
 public:
  RunResult run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt";
    const auto err = dir_ / "stderr.txt";
    const std::string command =
        std::string(BINEYE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(command.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  TempDir dir_;
};

/// Three random objects per flag, each one block plus a short dropped tail.
std::vector<std::string> write_fixture_objects(const Cli& cli, const std::string& flag, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> paths;
  for (int i = 0; i < 3; ++i) {
    std::vector<std::uint32_t> words(1200);
    for (auto& w : words) w = static_cast<std::uint32_t>(rng.next());
    const auto path = cli.path(flag.substr(1) + "_" + std::to_string(i) + ".o");
    write_bytes(path, text_object(words));
    paths.push_back(path);
  }
  return paths;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += " " + i;
  return s;
}

}  // namespace

TEST_CASE("usage errors exit 2 and help exits 0") {
  const Cli cli;
  CHECK(cli.run("").exit_code == 2);
  CHECK(cli.run("frobnicate").exit_code == 2);
  CHECK(cli.run("params --no-such-flag").exit_code == 2);
  CHECK(cli.run("--format xml params").exit_code == 2);
  CHECK(cli.run("classify").exit_code == 2);

  const auto top = cli.run("--help");
  CHECK(top.exit_code == 0);
  for (const char* sub : {"extract", "corpus", "train", "eval", "classify", "roc", "explain", "compare", "gradcheck",
                          "params"}) {
    INFO(sub);
    CHECK(top.out.find(sub) != std::string::npos);
    const auto help = cli.run(std::string(sub) + " --help");
    CHECK(help.exit_code == 0);
    CHECK(help.out.find("Usage") != std::string::npos);
  }
  for (const char* sub : {"add", "dedup", "split", "stats", "recipe"}) {
    INFO(sub);
    CHECK(cli.run(std::string("corpus ") + sub + " --help").exit_code == 0);
  }
}

TEST_CASE("params and gradcheck") {
  const Cli cli;
  const auto text = cli.run("--format text params");
  CHECK(text.exit_code == 0);
  CHECK(text.out == "32260\n");
  const auto json = cli.run("params --filters 0");
  CHECK(json.exit_code == 0);
  CHECK(nlohmann::json::parse(json.out)["param_count"] == 1028);
  CHECK(cli.run("params --kernels 3,2").exit_code == 1);

  const auto gc = cli.run("gradcheck --seed 7 --format text");
  CHECK(gc.exit_code == 0);
  CHECK(gc.out.rfind("max_relative_error ", 0) == 0);
  CHECK(std::stod(gc.out.substr(19)) < 1e-4);
  const auto many = cli.run("--seed 7 gradcheck --configs 10");
  CHECK(many.exit_code == 0);
  CHECK(nlohmann::json::parse(many.out)["runs"].size() == 10);
}

TEST_CASE("domain errors exit 1") {
  const Cli cli;
  write_bytes(cli.path("junk.o"), std::vector<std::uint8_t>{'M', 'Z', 0x90, 0});
  const auto missing = cli.run("extract " + cli.path("missing.o"));
  CHECK(missing.exit_code == 1);
  CHECK(missing.err.find("error") != std::string::npos);
  CHECK(missing.out.empty());
  CHECK(cli.run("extract " + cli.path("junk.o")).exit_code == 1);
  const auto objects = write_fixture_objects(cli, "-O0", 1);
  CHECK(cli.run("corpus add --manifest " + cli.path("m.jsonl") + " --flag=-Ofast" + join(objects)).exit_code == 1);
  CHECK(cli.run("corpus stats --manifest " + cli.path("none.jsonl")).exit_code == 1);
  CHECK(cli.run("corpus recipe --flag=-Os").exit_code == 0);
}

TEST_CASE("end-to-end pipeline through the command line") {
  const Cli cli;
  const std::string manifest = cli.path("corpus.jsonl");
  std::uint64_t seed = 10;
  for (const char* flag : {"-O0", "-O1", "-O2", "-Os"}) {
    const auto objects = write_fixture_objects(cli, flag, seed++);
    const auto added = cli.run("corpus add --manifest " + manifest + " --flag=" + flag + join(objects));
    REQUIRE(added.exit_code == 0);
  }
  // the same code under a second label is removed by dedup
  write_bytes(cli.path("clash.o"), read_file(cli.path("O0_0.o")));
  REQUIRE(cli.run("corpus add --manifest " + manifest + " --flag=-O3 " + cli.path("clash.o")).exit_code == 0);
  const auto dd = cli.run("corpus dedup --manifest " + manifest);
  REQUIRE(dd.exit_code == 0);
  CHECK(nlohmann::json::parse(dd.out)["conflicting_records_removed"] == 2);

  const auto sp = cli.run("--seed 3 corpus split --manifest " + manifest + " --test-fraction 0.34");
  REQUIRE(sp.exit_code == 0);
  const auto stats = nlohmann::json::parse(cli.run("corpus stats --manifest " + manifest).out);
  CHECK(stats["total_files"] == 11);

  const std::string train_args = "train --manifest " + manifest + " --filters 4 --epochs 2 --batch-size 4 --history " +
                                 cli.path("history.csv") + " --seed 5";
  const auto trained = cli.run(train_args + " --out " + cli.path("a.beye"));
  REQUIRE(trained.exit_code == 0);
  CHECK(nlohmann::json::parse(trained.out)["param_count"] == 1024 + 4 * 16 * 14 + 16 + 4 * 16 + 4);
  CHECK(slurp(cli.path("history.csv")).rfind("epoch,loss,heldout_accuracy,train_accuracy\n", 0) == 0);
  const auto threaded = cli.run(train_args + " --threads 2 --out " + cli.path("b.beye"));
  REQUIRE(threaded.exit_code == 0);
  CHECK(slurp(cli.path("a.beye")) == slurp(cli.path("b.beye")));

  const std::string model = " --model " + cli.path("a.beye");
  const auto eval = cli.run("eval --manifest " + manifest + model + " --split test");
  REQUIRE(eval.exit_code == 0);
  CHECK(nlohmann::json::parse(eval.out).contains("accuracy"));
  CHECK(cli.run("eval --manifest " + manifest + model + " --split test --level file").exit_code == 0);
  CHECK(cli.run("eval --manifest " + manifest + model + " --split unassigned").exit_code == 1);

  const auto classified = cli.run("classify " + cli.path("O1_0.o") + model);
  REQUIRE(classified.exit_code == 0);
  const auto verdict = nlohmann::json::parse(classified.out);
  CHECK(verdict["blocks"].size() == 1);
  CHECK(cli.run("classify " + cli.path("O1_0.o") + model + " --min-fill 64").out != classified.out);
  CHECK(cli.run("classify " + cli.path("O1_0.o") + model).out == classified.out);
  CHECK(cli.run("classify " + cli.path("missing.o") + model).exit_code == 1);

  const auto roc = cli.run("roc --manifest " + manifest + model);
  REQUIRE(roc.exit_code == 0);
  CHECK(roc.out.rfind("class,threshold,tpr,fpr\n", 0) == 0);
  CHECK(cli.run("--format json roc --manifest " + manifest + model).exit_code == 0);

  const auto explained = cli.run("explain " + cli.path("O0_1.o") + model + " --top 3");
  REQUIRE(explained.exit_code == 0);
  CHECK(nlohmann::json::parse(explained.out)["top_sites"].size() <= 3);
  CHECK(cli.run("--format text explain " + cli.path("O0_1.o") + model).exit_code == 0);
  const auto compared = cli.run("compare " + cli.path("O0_1.o") + " " + cli.path("Os_1.o") + model);
  REQUIRE(compared.exit_code == 0);
  CHECK(nlohmann::json::parse(compared.out).contains("differences"));
  CHECK(cli.run("compare " + cli.path("O0_1.o") + " " + cli.path("Os_1.o") + model).out == compared.out);

  const auto extracted = cli.run("extract " + cli.path("O0_0.o"));
  REQUIRE(extracted.exit_code == 0);
  const auto info = nlohmann::json::parse(extracted.out);
  CHECK(info["code_len"] == 1200 * 4);
  CHECK(info["blocks"].size() == 1);
}
