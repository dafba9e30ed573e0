#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(BAYESEG_CLI) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "bayeseg_tests" / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("cli exit codes") {
  CHECK(run("eval") == 2);
  CHECK(run("train train.stesp=3") == 2);
  CHECK(run("train --ablation nonsense") == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("eval --checkpoint /nonexistent/ckpt.bsckpt data.dir=/nonexistent") == 3);
  CHECK(run("gen-data -c /nonexistent.cfg") == 3);
}

TEST_CASE("cli gen-data creates the directory and is byte-reproducible") {
  auto a = fresh_dir("cli_a") / "nested", b = fresh_dir("cli_b");
  std::string common = " data.train=3 data.val=1 data.test=1 data.target_test=1";
  REQUIRE(run("gen-data data.dir=" + a.string() + common) == 0);
  REQUIRE(run("gen-data data.dir=" + b.string() + common) == 0);
  CHECK(fs::exists(a / "manifest.csv"));
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file() && e.path().filename() != "dataset.cfg") {
      auto rel = fs::relative(e.path(), a);
      CHECK(fs::file_size(e.path()) == fs::file_size(b / rel));
      ++n;
    }
  CHECK(n == 1 + 2 * (3 + 1 + 1 + 4));
}
