#include <doctest.h>

#include <filesystem>

#include "cfx/util.hpp"

namespace fs = std::filesystem;
using namespace cfx;

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex(std::string("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  // 56 bytes crosses the single-block padding boundary
  CHECK(sha256_hex(std::string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("rng determinism and fork independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  Rng f1 = c.fork("x"), f2 = c.fork("y");
  CHECK(f1.next_u64() != f2.next_u64());
  double mn = 1.0, mx = 0.0;
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    mn = std::min(mn, v);
    mx = std::max(mx, v);
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
  CHECK(mn < 0.1);
  CHECK(mx > 0.9);
}

TEST_CASE("pgm round trip is exact on the 8-bit grid") {
  const fs::path dir = fs::temp_directory_path() / "cfx_test_pgm";
  fs::create_directories(dir);
  ImageF img(5, 7);
  Rng rng(3);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 7; ++c) img(r, c) = quantize8(float(rng.uniform()));
  write_pgm(dir / "a.pgm", img);
  const ImageF back = read_pgm(dir / "a.pgm");
  REQUIRE(back.rows() == img.rows());
  REQUIRE(back.cols() == img.cols());
  CHECK(((back - img).abs() == 0.0f).all());

  MaskI m(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = (r + c) % 3;
  write_pgm_labels(dir / "m.pgm", m);
  const MaskI mb = read_pgm_labels(dir / "m.pgm");
  CHECK((mb == m).all());
  fs::remove_all(dir);
}
