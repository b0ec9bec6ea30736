#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mpcache/tensor.hpp"

using namespace mpcache;

namespace {

std::string to_bytes(const PlainTensor& t) {
    std::ostringstream os;
    mpct_write_stream(os, t);
    return os.str();
}

PlainTensor from_bytes(const std::string& s) {
    std::istringstream is(s);
    return mpct_read_stream(is, "<mem>");
}

}  // namespace

TEST_CASE("mpct round trip, real payload") {
    PlainTensor t = PlainTensor::from_reals({2, 3}, {1.0, -2.5, 3.25, 0.0, 1e-9, -7.125});
    PlainTensor u = from_bytes(to_bytes(t));
    REQUIRE(u.dims == t.dims);
    REQUIRE(u.dtype == DType::Real64);
    for (std::size_t i = 0; i < 6; ++i) CHECK(u.reals[i] == t.reals[i]);
}

TEST_CASE("mpct round trip, raw payload") {
    PlainTensor t = PlainTensor::from_raws({4}, {0ull, 1ull, 0xFFFFFFFFFFFFFFFFull, 0x123456789ABCDEF0ull});
    PlainTensor u = from_bytes(to_bytes(t));
    REQUIRE(u.dims == t.dims);
    REQUIRE(u.dtype == DType::Raw);
    for (std::size_t i = 0; i < 4; ++i) CHECK(u.raws[i] == t.raws[i]);
}

TEST_CASE("mpct header layout is stable") {
    std::string b = to_bytes(PlainTensor::from_reals({1}, {0.0}));
    REQUIRE(b.size() == 8 + 4 + 8);
    CHECK(b.substr(0, 4) == "MPCT");
    CHECK(b[4] == 1);   // version
    CHECK(b[5] == 0);   // real dtype
    CHECK(b[6] == 1);   // rank
    CHECK(b[7] == 0);   // reserved
    CHECK(b[8] == 1);   // extent 1, little endian
    CHECK(b[9] == 0);
}

TEST_CASE("mpct rejects bad magic") {
    std::string b = to_bytes(PlainTensor::from_reals({1}, {1.0}));
    b[0] = 'X';
    CHECK_THROWS_WITH_AS(from_bytes(b), doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("mpct rejects bad version and rank 0") {
    std::string b = to_bytes(PlainTensor::from_reals({1}, {1.0}));
    std::string v = b;
    v[4] = 9;
    CHECK_THROWS_WITH_AS(from_bytes(v), doctest::Contains("version"), std::runtime_error);
    std::string r = b;
    r[6] = 0;
    CHECK_THROWS_WITH_AS(from_bytes(r), doctest::Contains("rank 0"), std::runtime_error);
}

TEST_CASE("mpct reports truncation with byte offsets") {
    std::string b = to_bytes(PlainTensor::from_reals({2, 2}, {1, 2, 3, 4}));
    // cut inside the payload
    CHECK_THROWS_WITH_AS(from_bytes(b.substr(0, b.size() - 3)), doctest::Contains("truncated payload"),
                         std::runtime_error);
    // cut inside the extent list
    CHECK_THROWS_WITH_AS(from_bytes(b.substr(0, 10)), doctest::Contains("truncated extent"), std::runtime_error);
    // cut inside the header
    CHECK_THROWS_WITH_AS(from_bytes(b.substr(0, 5)), doctest::Contains("truncated header"), std::runtime_error);
    try {
        from_bytes(b.substr(0, b.size() - 3));
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        CHECK(doctest::Contains("offset").checkWith(e.what()));
    }
}

TEST_CASE("degenerate zero extents are legal") {
    PlainTensor t = PlainTensor::from_reals({0, 5}, {});
    PlainTensor u = from_bytes(to_bytes(t));
    CHECK(u.numel() == 0);
    CHECK(u.dims == std::vector<std::uint32_t>{0, 5});
}

TEST_CASE("encode/decode payload conversion") {
    PlainTensor t = PlainTensor::from_reals({3}, {1.0, -0.5, 2.25});
    PlainTensor raw = t.encoded();
    REQUIRE(raw.dtype == DType::Raw);
    CHECK(raw.raws[0] == fx::encode(1.0));
    PlainTensor back = raw.decoded();
    for (int i = 0; i < 3; ++i) CHECK(back.reals[i] == doctest::Approx(t.reals[i]).epsilon(1e-5));
}

TEST_CASE("mpct file round trip") {
    const char* path = "mpct_test_tmp.bin";
    PlainTensor t = PlainTensor::from_reals({2}, {42.0, -1.0});
    mpct_write(path, t);
    PlainTensor u = mpct_read(path);
    CHECK(u.reals[0] == 42.0);
    std::remove(path);
    CHECK_THROWS_AS(mpct_read("definitely_missing_file.mpct"), std::runtime_error);
}
