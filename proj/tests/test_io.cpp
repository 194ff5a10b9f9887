#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <sstream>

#include "microhom/rng.hpp"
#include "microhom/two_scale.hpp"

using namespace microhom;

namespace {

VectorField random_field(const Grid& g, int ncomp, std::uint64_t seed) {
    VectorField f(g, ncomp);
    const CounterRng rng{seed};
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = rng.uniform(i, -2.0, 2.0);
    return f;
}

} // namespace

TEST_CASE("field serialization round-trips bit-exactly") {
    Grid g = box_grid({-0.5, 0.0, 0.25}, {2.0, 1.0, 1.5}, {5, 4, 3});
    g.periodic = {true, false, true};
    const VectorField f = random_field(g, 3, 99);

    std::stringstream buf;
    write_tsf1(buf, f);
    const std::string bytes = buf.str();

    std::stringstream again;
    write_tsf1(again, f);
    CHECK(again.str() == bytes); // deterministic writer

    std::stringstream in(bytes);
    const VectorField f2 = read_tsf1(in);
    CHECK(f2.ncomp == f.ncomp);
    CHECK(f2.grid.n == f.grid.n);
    CHECK(f2.grid.periodic == f.grid.periodic);
    CHECK(f2.grid.origin == f.grid.origin);
    CHECK(f2.grid.extent == f.grid.extent);
    CHECK(f2.data == f.data); // exact payload

    std::stringstream round2;
    write_tsf1(round2, f2);
    CHECK(round2.str() == bytes);
}

TEST_CASE("field reader rejects malformed input with precise errors") {
    const Grid g = unit_cell_grid(2);
    const VectorField f = random_field(g, 1, 1);
    std::stringstream buf;
    write_tsf1(buf, f);
    std::string bytes = buf.str();

    SECTION("bad magic names the offset") {
        bytes[0] = 'X';
        std::stringstream in(bytes);
        try {
            read_tsf1(in);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
        }
    }
    SECTION("truncated payload names the missing section") {
        std::stringstream in(bytes.substr(0, bytes.size() - 4));
        try {
            read_tsf1(in);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("payload") != std::string::npos);
        }
    }
    SECTION("zero dimension is rejected") {
        // dims start after magic(4) + ncomp(1) + flags(1)
        for (int b = 0; b < 4; ++b) bytes[6 + b] = 0;
        std::stringstream in(bytes);
        CHECK_THROWS_AS(read_tsf1(in), FormatError);
    }
    SECTION("absurd dimensions are rejected before allocation") {
        for (int b = 0; b < 4; ++b) bytes[6 + b] = char(0xff);
        bytes[10] = bytes[14] = char(0xff);
        std::stringstream in(bytes);
        CHECK_THROWS_AS(read_tsf1(in), FormatError);
    }
}

TEST_CASE("file save and load round-trip") {
    const Grid g = unit_cell_grid(6);
    const VectorField f = random_field(g, 9, 5);
    const std::string path = "io_roundtrip_test.tsf";
    save_tsf1(path, f);
    const VectorField f2 = load_tsf1(path);
    CHECK(f2.data == f.data);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_tsf1("does_not_exist.tsf"), FormatError);
}

TEST_CASE("two-scale serialization keeps interior flags and payload exactly") {
    const Grid g = unit_cell_grid(12);
    const VectorField u = random_field(g, 3, 7);
    TwoScaleField ts = unfold(u, 0.25);
    ts.interior[2] = 0; // exercise a non-trivial flag pattern

    std::stringstream buf;
    write_ts2f(buf, ts);
    const std::string bytes = buf.str();
    std::stringstream in(bytes);
    const TwoScaleField ts2 = read_ts2f(in);

    CHECK(ts2.cells == ts.cells);
    CHECK(ts2.micro.n == ts.micro.n);
    CHECK(ts2.ncomp == ts.ncomp);
    CHECK(ts2.eps == Catch::Approx(ts.eps).margin(1e-15));
    CHECK(ts2.interior == ts.interior);
    CHECK(ts2.data == ts.data);

    std::stringstream round2;
    write_ts2f(round2, ts2);
    CHECK(round2.str() == bytes);

    SECTION("bad magic is rejected") {
        std::string corrupt = bytes;
        corrupt[1] = 'X';
        std::stringstream cin(corrupt);
        CHECK_THROWS_AS(read_ts2f(cin), FormatError);
    }
}
