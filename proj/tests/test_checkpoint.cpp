#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "tnt/checkpoint.hpp"

using namespace tnt;

namespace {

std::string tmp_path(const char* name) {
  return std::string("ckpt_test_") + name + ".tntc";
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("container round trip is bit exact") {
  std::vector<NamedTensor> ts;
  ts.push_back({"w", {2, 3}, {0.1, -2.5, 1e-300, 3.14159265358979, -0.0, 7.0}});
  ts.push_back({"blocks/0/bias", {4}, {1, 2, 3, 4}});
  ts.push_back({"\xc3\xa9tiquette", {1}, {42.0}});  // UTF-8 name survives
  std::string path = tmp_path("rt");
  save_container(path, ts);
  auto back = load_container(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].name == ts[i].name);
    CHECK(back[i].shape == ts[i].shape);
    REQUIRE(back[i].data.size() == ts[i].data.size());
    CHECK(std::memcmp(back[i].data.data(), ts[i].data.data(),
                      ts[i].data.size() * sizeof(double)) == 0);
  }
  std::remove(path.c_str());
}

TEST_CASE("two saves of the same tensors are byte identical") {
  std::vector<NamedTensor> ts{{"a", {3}, {1.5, 2.5, -3.5}}};
  std::string p1 = tmp_path("dup1"), p2 = tmp_path("dup2");
  save_container(p1, ts);
  save_container(p2, ts);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("bad magic is rejected at offset zero") {
  std::string path = tmp_path("magic");
  spit(path, "NOPE\x01\x00\x00\x00");
  try {
    load_container(path);
    FAIL("expected format_error");
  } catch (const format_error& e) {
    CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("truncated payload reports the offending byte") {
  std::vector<NamedTensor> ts{{"w", {4}, {1, 2, 3, 4}}};
  std::string path = tmp_path("trunc");
  save_container(path, ts);
  std::string bytes = slurp(path);
  spit(path, bytes.substr(0, bytes.size() - 9));  // cut into the payload
  try {
    load_container(path);
    FAIL("expected format_error");
  } catch (const format_error& e) {
    std::string m = e.what();
    CHECK(m.find("truncated") != std::string::npos);
    CHECK(m.find("byte") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("trailing garbage is malformed, not ignored") {
  std::vector<NamedTensor> ts{{"w", {1}, {5.0}}};
  std::string path = tmp_path("junk");
  save_container(path, ts);
  std::string bytes = slurp(path) + "xx";
  spit(path, bytes);
  CHECK_THROWS_AS(load_container(path), format_error);
  std::remove(path.c_str());
}

TEST_CASE("missing file and missing tensor") {
  CHECK_THROWS_AS(load_container("does_not_exist.tntc"), format_error);
  std::vector<NamedTensor> ts{{"present", {1}, {1.0}}};
  CHECK_THROWS_AS(find_tensor(ts, "absent"), format_error);
  CHECK(find_tensor(ts, "present").data[0] == 1.0);
}
