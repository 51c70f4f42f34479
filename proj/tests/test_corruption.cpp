#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "columbus/corruption.hpp"

using namespace columbus;

namespace {

AttributionMap elementwise_map(const std::vector<int>& shape, const std::vector<double>& vals) {
    AttributionMap m;
    m.level = 0;
    m.kind = MapKind::Elementwise;
    m.values = Tensor(shape);
    m.values.data = vals;
    return m;
}

} // namespace

TEST_CASE("top_p_mask boundary fractions") {
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {0.3, -0.1, 0.2, 0.05});
    FeatureMask none = top_p_mask(map, 0.0);
    for (auto s : none.selected) CHECK(s == 0);
    CHECK(none.count_per_example[0] == 0);

    FeatureMask all = top_p_mask(map, 1.0);
    for (auto s : all.selected) CHECK(s == 1);
    CHECK(all.count_per_example[0] == 4);

    CHECK_THROWS_AS(top_p_mask(map, -0.01), std::invalid_argument);
    CHECK_THROWS_AS(top_p_mask(map, 1.01), std::invalid_argument);
}

TEST_CASE("top_p_mask ranks by absolute value for elementwise maps") {
    // |3|, |-5|, |1|, |2| with p = 0.5 over 4 units -> ceil(2) = 2: picks -5 and 3
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {3.0, -5.0, 1.0, 2.0});
    FeatureMask mask = top_p_mask(map, 0.5);
    CHECK(mask.count_per_example[0] == 2);
    CHECK(mask.selected == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("top_p_mask spatial maps rank by raw value and cover all channels") {
    AttributionMap map;
    map.level = 1;
    map.kind = MapKind::Spatial;
    map.values = Tensor({1, 2, 2});
    map.values.data = {0.1, 0.9, 0.0, 0.4};
    FeatureMask mask = top_p_mask(map, 0.25); // ceil(0.25 * 4) = 1
    CHECK(mask.selected == std::vector<std::uint8_t>{0, 1, 0, 0});

    // the spatial mask zeroes every channel at the selected position
    Tensor repr({1, 3, 2, 2});
    for (std::size_t i = 0; i < repr.numel(); ++i) repr.data[i] = 1.0 + i;
    Tensor out = corrupt_repr(repr, mask);
    for (int c = 0; c < 3; ++c) {
        CHECK(out.at4(0, c, 0, 1) == 0.0);
        CHECK(out.at4(0, c, 0, 0) == repr.at4(0, c, 0, 0));
        CHECK(out.at4(0, c, 1, 0) == repr.at4(0, c, 1, 0));
        CHECK(out.at4(0, c, 1, 1) == repr.at4(0, c, 1, 1));
    }
}

TEST_CASE("top_p_mask ties break to the lowest row-major index") {
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {0.5, -0.5, 0.5, 0.5});
    FeatureMask mask = top_p_mask(map, 0.5);
    CHECK(mask.selected == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("top_p_mask selection count is ceil(p * units) per example") {
    AttributionMap map;
    map.kind = MapKind::Elementwise;
    map.level = 0;
    map.values = Tensor({3, 1, 3, 3}); // 9 units per example
    RngStream rng(5);
    for (double& v : map.values.data) v = rng.uniform(-1.0, 1.0);
    for (double p : {0.01, 0.1, 0.34, 0.5, 0.99}) {
        FeatureMask mask = top_p_mask(map, p);
        const std::size_t expect = static_cast<std::size_t>(std::ceil(p * 9.0));
        for (int n = 0; n < 3; ++n) {
            CHECK(mask.count_per_example[n] == expect);
            std::size_t got = 0;
            for (std::size_t i = 0; i < 9; ++i) got += mask.selected[n * 9 + i];
            CHECK(got == expect);
        }
    }
}

TEST_CASE("top_p_mask agrees with a full sort oracle") {
    AttributionMap map;
    map.kind = MapKind::Elementwise;
    map.level = 0;
    map.values = Tensor({2, 2, 4, 4}); // 32 units per example
    RngStream rng(17);
    for (double& v : map.values.data) v = rng.uniform(-1.0, 1.0);
    FeatureMask mask = top_p_mask(map, 0.3); // ceil(9.6) = 10

    for (int n = 0; n < 2; ++n) {
        // oracle: any selected unit must rank at least as high as any unselected one
        double min_selected = 1e30, max_unselected = -1e30;
        for (std::size_t i = 0; i < 32; ++i) {
            const double key = std::abs(map.values.data[n * 32 + i]);
            if (mask.selected[n * 32 + i])
                min_selected = std::min(min_selected, key);
            else
                max_unselected = std::max(max_unselected, key);
        }
        CHECK(min_selected >= max_unselected);
    }
}

TEST_CASE("zero corruption with a full mask blanks the input") {
    Tensor x({1, 1, 2, 2});
    x.data = {0.2, 0.4, 0.6, 0.8};
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0});
    FeatureMask mask = top_p_mask(map, 1.0);
    RngStream rng(1);
    Tensor out = corrupt_input(x, mask, CorruptionMethod::Zero, {}, nullptr, rng);
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("unmasked pixels are bit-identical to the input") {
    Tensor x({2, 1, 4, 4});
    RngStream rng(3);
    for (double& v : x.data) v = rng.uniform();
    AttributionMap map;
    map.kind = MapKind::Elementwise;
    map.level = 0;
    map.values = Tensor({2, 1, 4, 4});
    for (double& v : map.values.data) v = rng.uniform(-1.0, 1.0);
    FeatureMask mask = top_p_mask(map, 0.25);

    Tensor grad = map.values;
    CorruptionParams params;
    for (CorruptionMethod method : {CorruptionMethod::RandomValue, CorruptionMethod::Zero,
                                    CorruptionMethod::Fgsm, CorruptionMethod::GaussianBlur}) {
        RngStream r2(9);
        Tensor out = corrupt_input(x, mask, method, params, &grad, r2);
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (!mask.selected[i]) CHECK(out.data[i] == x.data[i]);
    }
}

TEST_CASE("fgsm steps by epsilon in the gradient sign direction, clamped") {
    Tensor x({1, 1, 1, 4});
    x.data = {0.5, 0.5, 0.98, 0.01};
    AttributionMap map = elementwise_map({1, 1, 1, 4}, {1.0, 1.0, 1.0, 1.0});
    FeatureMask mask = top_p_mask(map, 1.0);
    Tensor grad({1, 1, 1, 4});
    grad.data = {2.0, -3.0, 1.0, -1.0};
    CorruptionParams params;
    params.fgsm_epsilon = 0.1;
    RngStream rng(1);
    Tensor out = corrupt_input(x, mask, CorruptionMethod::Fgsm, params, &grad, rng);
    CHECK(out.data[0] == doctest::Approx(0.6));
    CHECK(out.data[1] == doctest::Approx(0.4));
    CHECK(out.data[2] == 1.0); // clamped high
    CHECK(out.data[3] == 0.0); // clamped low

    // epsilon = 0 is the identity; zero gradient leaves the pixel alone
    params.fgsm_epsilon = 0.0;
    Tensor same = corrupt_input(x, mask, CorruptionMethod::Fgsm, params, &grad, rng);
    CHECK(same.data == x.data);
    params.fgsm_epsilon = 0.1;
    grad.data = {0.0, 0.0, 0.0, 0.0};
    Tensor zero_grad = corrupt_input(x, mask, CorruptionMethod::Fgsm, params, &grad, rng);
    CHECK(zero_grad.data == x.data);

    CHECK_THROWS_AS(corrupt_input(x, mask, CorruptionMethod::Fgsm, params, nullptr, rng),
                    std::invalid_argument);
}

TEST_CASE("gaussian blur: kernel is normalized and center-weighted") {
    // constant image stays constant (kernel sums to 1, edge-replicate padding)
    Tensor flat({1, 1, 6, 6});
    for (double& v : flat.data) v = 0.7;
    AttributionMap map;
    map.kind = MapKind::Elementwise;
    map.level = 0;
    map.values = Tensor({1, 1, 6, 6});
    for (double& v : map.values.data) v = 1.0;
    FeatureMask mask = top_p_mask(map, 1.0);
    RngStream rng(1);
    Tensor out = corrupt_input(flat, mask, CorruptionMethod::GaussianBlur, {}, nullptr, rng);
    for (double v : out.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

    // a single spike spreads: center keeps the largest share and mass is conserved
    // away from the borders
    Tensor spike({1, 1, 9, 9});
    spike.at4(0, 0, 4, 4) = 1.0;
    map.values = Tensor({1, 1, 9, 9});
    for (double& v : map.values.data) v = 1.0;
    mask = top_p_mask(map, 1.0);
    Tensor blurred = corrupt_input(spike, mask, CorruptionMethod::GaussianBlur, {}, nullptr, rng);
    const double center = blurred.at4(0, 0, 4, 4);
    double total = 0.0;
    for (double v : blurred.data) total += v;
    CHECK(center > 0.0);
    for (int i = 2; i <= 6; ++i)
        for (int j = 2; j <= 6; ++j)
            CHECK(blurred.at4(0, 0, i, j) <= center);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9)); // 5x5 support fits inside
    // symmetry of the kernel
    CHECK(blurred.at4(0, 0, 3, 4) == doctest::Approx(blurred.at4(0, 0, 5, 4)));
    CHECK(blurred.at4(0, 0, 4, 3) == doctest::Approx(blurred.at4(0, 0, 4, 5)));
}

TEST_CASE("random value corruption draws fresh uniforms deterministically") {
    Tensor x({1, 1, 2, 2});
    x.data = {0.5, 0.5, 0.5, 0.5};
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {1.0, 0.0, 1.0, 0.0});
    FeatureMask mask = top_p_mask(map, 0.5);
    RngStream a(42), b(42);
    Tensor o1 = corrupt_input(x, mask, CorruptionMethod::RandomValue, {}, nullptr, a);
    Tensor o2 = corrupt_input(x, mask, CorruptionMethod::RandomValue, {}, nullptr, b);
    CHECK(o1.data == o2.data); // same stream state -> identical draw
    for (std::size_t i = 0; i < 4; ++i) {
        if (mask.selected[i]) {
            CHECK(o1.data[i] >= 0.0);
            CHECK(o1.data[i] < 1.0);
        } else {
            CHECK(o1.data[i] == 0.5);
        }
    }
}

TEST_CASE("targeted dropout zeroes selected units without rescaling survivors") {
    Tensor repr({1, 2, 2, 2});
    repr.data = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0};
    AttributionMap map;
    map.kind = MapKind::Elementwise;
    map.level = 1;
    map.values = Tensor({1, 2, 2, 2});
    map.values.data = {0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0};
    FeatureMask mask = top_p_mask(map, 0.25); // 2 of 8 units
    Tensor out = corrupt_repr(repr, mask);
    CHECK(out.data == std::vector<double>{1.0, 0.0, 3.0, 4.0, 5.0, 6.0, 0.0, 8.0});

    // idempotent
    Tensor again = corrupt_repr(out, mask);
    CHECK(again.data == out.data);
}

TEST_CASE("level/method mismatches are rejected") {
    Tensor x({1, 1, 2, 2});
    AttributionMap m0 = elementwise_map({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    FeatureMask mask0 = top_p_mask(m0, 0.5);
    RngStream rng(1);
    CHECK_THROWS_AS(corrupt_input(x, mask0, CorruptionMethod::TargetedDropout, {}, nullptr, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(corrupt_repr(x, mask0), std::invalid_argument); // level-0 mask

    AttributionMap m1 = m0;
    m1.level = 1;
    FeatureMask mask1 = top_p_mask(m1, 0.5);
    CHECK_THROWS_AS(corrupt_input(x, mask1, CorruptionMethod::Zero, {}, nullptr, rng),
                    std::invalid_argument);

    CorruptionParams bad;
    bad.blur_kernel = 4;
    CHECK_THROWS_AS(corrupt_input(x, mask0, CorruptionMethod::GaussianBlur, bad, nullptr, rng),
                    std::invalid_argument);
}

TEST_CASE("corruption applications are counted") {
    Tensor x({1, 1, 2, 2});
    AttributionMap map = elementwise_map({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    FeatureMask mask = top_p_mask(map, 0.5);
    RngStream rng(1);
    const std::uint64_t before = corruption_call_counter().load();
    corrupt_input(x, mask, CorruptionMethod::Zero, {}, nullptr, rng);
    AttributionMap m1 = map;
    m1.level = 1;
    corrupt_repr(x, top_p_mask(m1, 0.5));
    CHECK(corruption_call_counter().load() == before + 2);
}
