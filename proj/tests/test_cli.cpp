#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "scenenet/image_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "scenenet_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run cli(const std::string& args) {
  const auto out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
  const std::string cmd = std::string("\"") + SCENENET_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const auto p = workdir() / name;
  std::ofstream(p) << text;
  return p;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string line_starting(const std::string& text, const std::string& prefix) {
  for (const auto& l : lines(text))
    if (l.rfind(prefix, 0) == 0) return l;
  return {};
}

const std::string kDeskConfig = "depth = 18\nwidth_factor = 0.25\nclasses = 4\ninput_size = 16\nstem = small\n";
const std::string kDeskData = "synthetic:classes=4,side=16,per_class=8,sigma=0.05,seed=3";

}  // namespace

TEST_CASE("describe") {
  const auto dn = write_config("dn.cfg", "depth = 101\nwidth_factor = 0.5\nclasses = 365\n");
  const auto r = cli("describe --arch " + dn.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("layer,type,output,params\n", 0) == 0);
  CHECK(line_starting(r.out, "fc,") == "fc,linear(1024->365),365x1x1,374125");
  CHECK(line_starting(r.out, "# blocks") == "# blocks 3,4,23,3");
  CHECK(line_starting(r.out, "# weighted_layers") == "# weighted_layers 101");

  const auto r18 = write_config("r18.cfg", "depth = 18\n");
  CHECK(line_starting(cli("describe --arch " + r18.string()).out, "# blocks") == "# blocks 2,2,2,2");
  CHECK(cli("describe --arch " + r18.string() + " --pretty").code == 0);
}

TEST_CASE("cost") {
  const auto r50 = write_config("r50.cfg", "depth = 50\nwidth_factor = 1\nclasses = 365\n");
  const auto csv = workdir() / "cost.csv";
  const auto r = cli("cost --arch " + r50.string() + " --csv " + csv.string());
  REQUIRE(r.code == 0);
  CHECK(r.out == "resnet50x1 4.09 24.26\n");

  // Per-layer rows sum to the total row.
  std::uint64_t macs = 0, params = 0, total_macs = 0, total_params = 0;
  for (const auto& l : lines(slurp(csv))) {
    if (l == "layer,macs,params") continue;
    std::istringstream in(l);
    std::string name, m, p;
    std::getline(in, name, ',');
    std::getline(in, m, ',');
    std::getline(in, p);
    if (name == "total") {
      total_macs = std::stoull(m);
      total_params = std::stoull(p);
    } else {
      macs += std::stoull(m);
      params += std::stoull(p);
    }
  }
  CHECK(macs == total_macs);
  CHECK(params == total_params);

  const auto dp = write_config("dp.cfg", "depth = 101\nwidth_factor = 0.5\nclasses = 365\ndownsample = dilated_pool\n");
  CHECK(cli("cost --arch " + dp.string()).out == "deep-narrow+dp 1.98 11.03\n");
}

TEST_CASE("bad config exits 2 naming the key") {
  const auto bad = write_config("bad.cfg", "depth = 18\nwdith = 1\n");
  const auto r = cli("cost --arch " + bad.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("wdith") != std::string::npos);

  const auto depth = write_config("depth.cfg", "depth = 34\n");
  const auto r2 = cli("describe --arch " + depth.string());
  CHECK(r2.code == 2);
  CHECK(r2.err.find("depth") != std::string::npos);

  CHECK(cli("cost").code == 2);
}

TEST_CASE("filter") {
  const auto imgs = workdir() / "imgs";
  REQUIRE(cli("gen-data --out " + imgs.string() + " --classes 2 --side 16 --per-class 2 --seed 5").code == 0);
  fs::path image;
  for (const auto& e : fs::recursive_directory_iterator(imgs))
    if (e.path().extension() == ".ppm") {
      image = e.path();
      break;
    }
  REQUIRE(!image.empty());

  const auto out = workdir() / "low16.ppm";
  REQUIRE(cli("filter --input " + image.string() + " --kind low --size 16 --out " + out.string()).code == 0);
  const auto a = scenenet::read_pnm(image), b = scenenet::read_pnm(out);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) * 255.0f <= 1.0f + 1e-4f);

  const auto dark = workdir() / "low0.ppm";
  REQUIRE(cli("filter --input " + image.string() + " --kind low --size 0 --out " + dark.string()).code == 0);
  const auto black = scenenet::read_pnm(dark);
  for (float v : black.values()) CHECK(v == 0.0f);

  CHECK(cli("filter --input " + image.string() + " --kind low --size 17 --out " + dark.string()).code == 2);
  CHECK(cli("filter --input " + image.string() + " --kind band --size 4 --out " + dark.string()).code == 2);
}

TEST_CASE("train, sweep and eval") {
  const auto cfg = write_config("desk.cfg", kDeskConfig);
  const auto ck1 = workdir() / "ck1", ck2 = workdir() / "ck2";
  const std::string common = " --arch " + cfg.string() + " --data " + kDeskData + " --epochs 2 --batch 8 --seed 7 --strict";
  const auto a = cli("train" + common + " --out " + ck1.string());
  const auto b = cli("train" + common + " --out " + ck2.string());
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const auto digest = line_starting(a.out, "# digest");
  CHECK(digest.size() == std::string("# digest ").size() + 16);
  CHECK(digest == line_starting(b.out, "# digest"));
  CHECK(lines(a.out).front() == "epoch,lr,train_loss,train_top1,val_top1,val_top5");

  // Re-running into the same directory reproduces it.
  CHECK(cli("train" + common + " --out " + ck1.string()).out == a.out);

  const auto sw = cli("sweep --checkpoint " + ck1.string() + " --data " + kDeskData + " --sizes 0,4,8,12,16");
  REQUIRE(sw.code == 0);
  const auto rows = lines(sw.out);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == "kind,size,top1,top5,n");
  CHECK(rows[1].rfind("low,0,", 0) == 0);
  CHECK(rows[5].rfind("low,16,", 0) == 0);

  const auto ev = cli("eval --checkpoint " + ck1.string() + " --data " + kDeskData);
  REQUIRE(ev.code == 0);
  CHECK(lines(ev.out).size() == 2);

  // Five classes of data against a four-class model.
  CHECK(cli("eval --checkpoint " + ck1.string() + " --data synthetic:classes=5,side=16,per_class=2").code == 2);
  CHECK(cli("train --arch " + cfg.string() + " --data synthetic:classes=4,side=16,per_class=2,bogus=1 --out " +
            (workdir() / "ck3").string())
            .code == 2);
}

TEST_CASE("divergent training exits 3") {
  const auto cfg = write_config("desk.cfg", kDeskConfig);
  const auto r = cli("train --arch " + cfg.string() + " --data " + kDeskData +
                     " --epochs 3 --batch 8 --lr 1e12 --seed 1 --strict --out " + (workdir() / "nan").string());
  CHECK(r.code == 3);
}

TEST_CASE("full-size sweep emits one row per size") {
  const auto cfg = write_config("wide.cfg", "depth = 18\nwidth_factor = 0.25\nclasses = 2\ninput_size = 224\n");
  const auto ck = workdir() / "ck224";
  const std::string data = "synthetic:classes=2,side=224,per_class=1,seed=9";
  REQUIRE(cli("train --arch " + cfg.string() + " --data " + data + " --epochs 0 --seed 1 --out " + ck.string()).code ==
          0);
  const auto r = cli("sweep --checkpoint " + ck.string() + " --data " + data + " --kind high --sizes 0,56,112,168,224");
  REQUIRE(r.code == 0);
  CHECK(lines(r.out).size() == 6);
}
