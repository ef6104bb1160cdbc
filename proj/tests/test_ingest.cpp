#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sflabel/ingest.hpp"
#include "sflabel/rng.hpp"

using namespace sflabel;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "sflabel_ingest_tests";
  fs::create_directories(dir);
  return dir;
}

void write_raw(const fs::path& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

}  // namespace

TEST_CASE("read_point_binary round trip and errors") {
  const fs::path dir = temp_dir();

  SECTION("single record") {
    const fs::path f = dir / "one.bin";
    write_raw(f, {1.0f, 2.0f, 3.0f, 0.5f});
    const PointCloud cloud = read_point_binary(f);
    REQUIRE(cloud.size() == 1);
    CHECK((cloud.points[0] - Vec3(1, 2, 3)).norm() == 0.0);
    CHECK(cloud.intensity[0] == 0.5f);
  }
  SECTION("empty file is a format error") {
    const fs::path f = dir / "empty.bin";
    std::ofstream(f, std::ios::trunc).close();
    CHECK_THROWS_AS(read_point_binary(f), format_error);
  }
  SECTION("misaligned size is a format error") {
    const fs::path f = dir / "bad.bin";
    std::ofstream out(f, std::ios::binary | std::ios::trunc);
    const char junk[33] = {0};
    out.write(junk, 33);
    out.close();
    CHECK_THROWS_AS(read_point_binary(f), format_error);
  }
  SECTION("non-finite records dropped with count") {
    const fs::path f = dir / "nan.bin";
    write_raw(f, {1.0f, 2.0f, 3.0f, 0.0f, std::numeric_limits<float>::quiet_NaN(), 0.0f, 0.0f,
                  0.0f, 4.0f, 5.0f, 6.0f, 1.0f});
    std::size_t dropped = 0;
    const PointCloud cloud = read_point_binary(f, &dropped);
    CHECK(cloud.size() == 2);
    CHECK(dropped == 1);
  }
  SECTION("write then read is byte-identical") {
    const fs::path a = dir / "a.bin";
    const fs::path b = dir / "b.bin";
    PointCloud cloud;
    Rng rng(5);
    for (int i = 0; i < 257; ++i) {
      cloud.points.emplace_back(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3, 3));
      cloud.intensity.push_back(static_cast<float>(rng.uniform()));
    }
    write_point_binary(a, cloud);
    write_point_binary(b, read_point_binary(a));
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    const std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(da == db);
    CHECK(da.size() == 257 * 16);
  }
}

TEST_CASE("ascii ply reader") {
  const fs::path dir = temp_dir();
  const fs::path f = dir / "cloud.ply";
  {
    std::ofstream out(f, std::ios::trunc);
    out << "ply\nformat ascii 1.0\nelement vertex 2\n"
           "property float x\nproperty float y\nproperty float z\nproperty float intensity\n"
           "end_header\n"
           "1 2 3 9\n-1 0.5 2.5 8\n";
  }
  const PointCloud cloud = read_point_ply(f);
  REQUIRE(cloud.size() == 2);
  CHECK((cloud.points[1] - Vec3(-1, 0.5, 2.5)).norm() == 0.0);

  const fs::path bad = dir / "bad.ply";
  std::ofstream(bad, std::ios::trunc) << "not a ply\n";
  CHECK_THROWS_AS(read_point_ply(bad), format_error);
}

TEST_CASE("remove_ground") {
  GroundConfig cfg;
  cfg.seed = 17;

  SECTION("plane plus survivor") {
    PointCloud cloud;
    Rng rng(3);
    for (int i = 0; i < 400; ++i)
      cloud.points.emplace_back(rng.uniform(-10, 10), rng.uniform(-10, 10), -1.7);
    cloud.points.emplace_back(1.0, 1.0, 0.0);
    const FilterResult out = remove_ground(cloud, cfg);
    REQUIRE(out.cloud.size() == 1);
    CHECK(out.kept[0] == 400);
    CHECK(out.cloud.points[0].z() == 0.0);
  }
  SECTION("no points below prior is a no-op") {
    PointCloud cloud;
    Rng rng(4);
    for (int i = 0; i < 50; ++i)
      cloud.points.emplace_back(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0, 2));
    const FilterResult out = remove_ground(cloud, cfg);
    CHECK(out.cloud.size() == cloud.size());
  }
  SECTION("kept indices map outputs to inputs") {
    PointCloud cloud;
    Rng rng(5);
    for (int i = 0; i < 500; ++i)
      cloud.points.emplace_back(rng.uniform(-10, 10), rng.uniform(-10, 10),
                                i % 3 == 0 ? -1.7 : rng.uniform(-0.5, 2.0));
    const FilterResult out = remove_ground(cloud, cfg);
    REQUIRE(out.kept.size() == out.cloud.size());
    for (std::size_t i = 0; i < out.kept.size(); ++i)
      CHECK((out.cloud.points[i] - cloud.points[out.kept[i]]).norm() == 0.0);
  }
  SECTION("all points on the plane is an error") {
    PointCloud cloud;
    Rng rng(6);
    for (int i = 0; i < 100; ++i)
      cloud.points.emplace_back(rng.uniform(-10, 10), rng.uniform(-10, 10), -1.7);
    CHECK_THROWS(remove_ground(cloud, cfg));
  }
}

TEST_CASE("estimate_normals") {
  SECTION("planar patch") {
    PointCloud cloud;
    Rng rng(8);
    for (int i = 0; i < 300; ++i)
      cloud.points.emplace_back(rng.uniform(2, 6), rng.uniform(-2, 2), 0.0);
    const NormalField normals = estimate_normals(cloud, 16, Vec3(0, 0, 5));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      CHECK(std::abs(normals.normals[i].norm() - 1.0) < 1e-6);
      CHECK(std::abs(std::abs(normals.normals[i].z()) - 1.0) < 1e-3);
      CHECK(normals.normals[i].z() > 0.0);  // sensor above the plane
    }
  }
  SECTION("collinear points flag degenerate") {
    PointCloud cloud;
    for (int i = 0; i < 8; ++i) cloud.points.emplace_back(static_cast<double>(i), 0.0, 1.0);
    const NormalField normals = estimate_normals(cloud, 3);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      CHECK(normals.degenerate[i] == 1);
      CHECK(std::abs(normals.normals[i].norm() - 1.0) < 1e-9);
    }
  }
  SECTION("sphere normals point inward") {
    PointCloud cloud;
    Rng rng(9);
    for (int i = 0; i < 2000; ++i) cloud.points.push_back(5.0 * rng.unit_sphere());
    const NormalField normals = estimate_normals(cloud, 16);
    std::size_t good = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3 inward = -cloud.points[i].normalized();
      if (std::acos(std::clamp(normals.normals[i].dot(inward), -1.0, 1.0)) < 5.0 * kPi / 180.0)
        ++good;
    }
    CHECK(static_cast<double>(good) / static_cast<double>(cloud.size()) > 0.95);
  }
  SECTION("preconditions") {
    PointCloud cloud;
    for (int i = 0; i < 5; ++i) cloud.points.emplace_back(i, 0, 0);
    CHECK_THROWS_AS(estimate_normals(cloud, 5), std::invalid_argument);
    CHECK_THROWS_AS(estimate_normals(cloud, 2), std::invalid_argument);
  }
  SECTION("invariant under rigid motion with consistent sensor") {
    PointCloud cloud;
    Rng rng(10);
    for (int i = 0; i < 400; ++i)
      cloud.points.emplace_back(rng.uniform(3, 8), rng.uniform(-3, 3),
                                0.3 * std::sin(rng.uniform(0, 6)));
    RigidTransform tf;
    tf.rotation = so3_exp(Vec3(0.3, -0.2, 0.8));
    tf.translation = Vec3(4, -2, 1);
    const PointCloud moved = transform_points(cloud, tf);
    const NormalField base = estimate_normals(cloud, 12, Vec3::Zero());
    const NormalField after = estimate_normals(moved, 12, tf.apply(Vec3::Zero()));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3 expect = tf.rotation * base.normals[i];
      const double err = std::min((after.normals[i] - expect).norm(),
                                  (after.normals[i] + expect).norm());
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("sample_points") {
  PointCloud cloud;
  Rng rng(12);
  for (int i = 0; i < 20000; ++i)
    cloud.points.emplace_back(rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-2, 2));

  SECTION("deterministic for a seed") {
    PointCloud small;
    for (int i = 0; i < 10; ++i) small.points.emplace_back(i, 0, 0);
    const FilterResult a = sample_points(small, 4, 99);
    const FilterResult b = sample_points(small, 4, 99);
    REQUIRE(a.kept.size() == 4);
    CHECK(a.kept == b.kept);
    const FilterResult c = sample_points(small, 4, 100);
    CHECK(a.kept != c.kept);  // different stream
  }
  SECTION("undersized cloud returned unchanged") {
    PointCloud small;
    for (int i = 0; i < 3; ++i) small.points.emplace_back(i, 0, 0);
    const FilterResult out = sample_points(small, 8192, 7);
    CHECK(out.cloud.size() == 3);
    CHECK(out.kept == std::vector<std::size_t>{0, 1, 2});
  }
  SECTION("8192-point subsample") {
    const FilterResult out = sample_points(cloud, 8192, 1);
    REQUIRE(out.cloud.size() == 8192);
    for (std::size_t i = 0; i < out.kept.size(); ++i)
      CHECK((out.cloud.points[i] - cloud.points[out.kept[i]]).norm() == 0.0);
    // distinct, sorted indices
    for (std::size_t i = 1; i < out.kept.size(); ++i) CHECK(out.kept[i] > out.kept[i - 1]);
  }
  SECTION("bit-for-bit reproducible") {
    const FilterResult a = sample_points(cloud, 8192, 42);
    const FilterResult b = sample_points(cloud, 8192, 42);
    CHECK(a.kept == b.kept);
  }
}

TEST_CASE("crop_front_view keeps x > 0") {
  PointCloud cloud;
  cloud.points = {{1, 0, 0}, {-1, 0, 0}, {2, 3, -1}, {0, 1, 1}};
  const FilterResult out = crop_front_view(cloud);
  REQUIRE(out.cloud.size() == 2);
  CHECK(out.kept == std::vector<std::size_t>{0, 2});
}
