#include <doctest.h>

#include <sstream>

#include "stats/errors.hpp"
#include "stats/rng.hpp"
#include "stats/tensor.hpp"

using namespace stats;

TEST_CASE("tensor shape and data agree") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    t.at(1, 2) = 5.0;
    CHECK(t[5] == 5.0);

    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("scalar tensors") {
    Tensor s = Tensor::scalar(3.5);
    CHECK(s.is_scalar());
    CHECK(s.item() == 3.5);
    CHECK_THROWS_AS(Tensor({2}).item(), ContractError);
}

TEST_CASE("finiteness checks") {
    Tensor t({2});
    CHECK(t.all_finite());
    t[1] = std::numeric_limits<double>::infinity();
    CHECK(!t.all_finite());
    CHECK_THROWS_AS(require_finite(t, "test"), NumericError);
}

TEST_CASE("serialization roundtrip is exact") {
    RngStream rng(77);
    Tensor t({3, 4, 2});
    rng.fill_normal(t, 0.0, 10.0);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss);
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
}

TEST_CASE("serialization layout: rank and dims as u32, payload f64 LE") {
    Tensor t({1, 2}, {1.0, -2.0});
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    REQUIRE(bytes.size() == 4 + 2 * 4 + 2 * 8);
    CHECK(static_cast<unsigned char>(bytes[0]) == 2);  // rank, little-endian
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // dim 0
    CHECK(static_cast<unsigned char>(bytes[8]) == 2);  // dim 1
    // 1.0 encodes as 0x3ff0000000000000.
    CHECK(static_cast<unsigned char>(bytes[12 + 7]) == 0x3f);
    CHECK(static_cast<unsigned char>(bytes[12 + 6]) == 0xf0);
}

TEST_CASE("truncated stream raises a format error") {
    Tensor t({4});
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_tensor(cut), FormatError);
}

TEST_CASE("rng streams are deterministic and substreams independent") {
    RngStream a(123);
    RngStream b(123);
    for (int i = 0; i < 16; ++i) CHECK(a.uniform() == b.uniform());

    RngStream base(9);
    RngStream s1 = base.substream("shuffle");
    RngStream s2 = base.substream("init");
    CHECK(s1.uniform() != s2.uniform());

    RngStream c1 = base.substream("shuffle");
    RngStream c2 = base.substream("shuffle");
    CHECK(c1.next_u64() == c2.next_u64());
}

TEST_CASE("multinomial consumes one draw and respects the distribution") {
    RngStream rng(5);
    std::vector<double> probs{0.0, 1.0, 0.0};
    auto before = rng.draw_count();
    CHECK(rng.multinomial(probs) == 1);
    CHECK(rng.draw_count() == before + 1);

    // Degenerate rounding: mass that sums slightly below one still lands on
    // a positive-probability entry.
    std::vector<double> probs2{0.25, 0.25, 0.25, 0.2499999999};
    for (int i = 0; i < 100; ++i) {
        auto k = rng.multinomial(probs2);
        CHECK(k < 4);
    }
}
