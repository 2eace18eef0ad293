#include <filesystem>
#include <fstream>

#include "calibra/data.h"
#include "calibra/errors.h"
#include "doctest.h"

using namespace calibra;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / ("calibra_test_" + name);
  std::ofstream(path) << text;
  return path.string();
}

}  // namespace

TEST_CASE("load a small main file") {
  const auto path = write_temp("main4.csv", "y,x,z1,z2\n1.5,0,0.1,2\n2,1,0.2,3\n3,1,-1,4\n4,0,1e-3,5\n");
  const auto d = load_main_csv(path, "y", "x");
  CHECK(d.size() == 4);
  CHECK(d.covariates() == 2);
  CHECK(d.levels() == 2);
  CHECK(d.column_names == std::vector<std::string>{"z1", "z2"});
  CHECK(d.z(3, 0) == doctest::Approx(1e-3));
}

TEST_CASE("exposure is densely recoded in numeric order") {
  const auto path = write_temp("recode.csv", "z,x,y\n0,3,1\n1,1,2\n2,3,3\n3,1,4\n");
  const auto d = load_main_csv(path, "y", "x");
  CHECK(d.coding.codes == std::vector<long long>{1, 3});
  CHECK(d.x == std::vector<int>{1, 0, 1, 0});
  CHECK(d.coding.encode(3) == 1);
  CHECK(d.coding.encode(2) == -1);
}

TEST_CASE("missing and malformed cells name their location") {
  const auto nan = write_temp("nan.csv", "y,x,z1\n1,0,2\n2,1,NaN\n3,0,1\n4,1,1\n");
  CHECK_THROWS_WITH_AS(load_main_csv(nan, "y", "x"), "missing value at row 2, column z1", IoError);
  const auto bad = write_temp("bad.csv", "y,x,z1\n1,0,abc\n2,1,3\n3,0,1\n4,1,1\n");
  CHECK_THROWS_AS(load_main_csv(bad, "y", "x"), IoError);
  CHECK_THROWS_AS(load_main_csv(nan, "y", "nope"), IoError);
  CHECK_THROWS_AS(load_main_csv("/nonexistent/file.csv", "y", "x"), IoError);
  CHECK_THROWS_AS(load_main_csv(write_temp("empty.csv", ""), "y", "x"), IoError);
  const auto cont = write_temp("cont.csv", "y,x\n1,0.5\n2,1\n3,0\n4,1\n");
  CHECK_THROWS_AS(load_main_csv(cont, "y", "x"), ValidationError);
}

TEST_CASE("quoted fields follow RFC 4180") {
  const auto path = write_temp("quoted.csv", "\"y\",\"x\",\"a,b\"\r\n\"1\",0,2\r\n2,1,\"3\"\r\n3,0,1\r\n4,1,0\r\n");
  const auto d = load_main_csv(path, "y", "x");
  CHECK(d.column_names == std::vector<std::string>{"a,b"});
  CHECK(d.z(1, 0) == 3.0);
}

TEST_CASE("aux loader drops covariates and checks levels") {
  const auto main = load_main_csv(write_temp("m.csv", "y,x\n1,0\n2,1\n3,0\n4,1\n"), "y", "x");
  std::string text = "y,x\n";
  for (int i = 0; i < 10; ++i) text += std::to_string(i) + "," + std::to_string(i % 2) + "\n";
  CHECK(load_aux_csv(write_temp("a10.csv", text), "y", "x", main.coding).size() == 10);

  LoadWarnings w;
  const auto aux = load_aux_csv(write_temp("az.csv", "y,x,z1\n1,0,5\n2,1,6\n"), "y", "x",
                                main.coding, {}, &w);
  CHECK(aux.size() == 2);
  REQUIRE(w.messages.size() == 1);
  CHECK(w.messages[0] == "1 covariate column ignored");

  CHECK_THROWS_AS(load_aux_csv(write_temp("a2.csv", "y,x\n1,2\n"), "y", "x", main.coding),
                  ValidationError);
}

TEST_CASE("validation floors and notes") {
  StudyConfig config;
  MainDataset main;
  main.coding = LevelCoding::identity(3);
  const std::vector<std::size_t> counts{549, 1661, 667};
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < counts[static_cast<std::size_t>(k)]; ++i) main.x.push_back(k);
  main.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(main.x.size()));
  main.z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(main.x.size()), 1);
  const auto report = validate_study(main, AuxDataset{}, config);
  CHECK(report.level_counts == counts);
  REQUIRE(report.notes.size() == 1);
  CHECK(report.notes[0].find("CMLIB will equal CML") != std::string::npos);

  MainDataset small = main;
  small.x.assign(main.x.size(), 0);
  for (int i = 0; i < 3; ++i) small.x[static_cast<std::size_t>(i)] = 1;
  for (int i = 3; i < 20; ++i) small.x[static_cast<std::size_t>(i)] = 2;
  CHECK_THROWS_AS(validate_study(small, AuxDataset{}, config), ValidationError);
}

TEST_CASE("main CSV round trip is bit-identical") {
  MainDataset d;
  d.coding.codes = {2, 7};
  d.column_names = {"a", "b"};
  d.y.resize(6);
  d.z.resize(6, 2);
  for (int i = 0; i < 6; ++i) {
    d.y(i) = std::sqrt(2.0) * i - 1.0 / 3.0;
    d.z(i, 0) = std::exp(-i) * 1e-300;
    d.z(i, 1) = std::nextafter(1.0, 2.0) * i;
    d.x.push_back(i % 2);
  }
  const auto path = (std::filesystem::temp_directory_path() / "calibra_rt.csv").string();
  write_main_csv(d, path);
  const auto r = load_main_csv(path, "y", "x");
  CHECK(r.x == d.x);
  CHECK(r.coding.codes == d.coding.codes);
  CHECK((r.y.array() == d.y.array()).all());
  CHECK((r.z.array() == d.z.array()).all());
}
