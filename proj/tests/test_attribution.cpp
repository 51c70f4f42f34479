#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "columbus/attribution.hpp"

using namespace columbus;

namespace {

Tensor random_input(int n, int c, int h, int w, std::uint64_t seed) {
    Tensor x({n, c, h, w});
    RngStream rng(seed);
    for (double& v : x.data) v = rng.uniform();
    return x;
}

double true_prob_sum(ModelGraph& m, const Tensor& x, const std::vector<int>& labels) {
    Prediction pred = m.forward(x);
    double s = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n)
        s += pred.probabilities.at2(static_cast<int>(n), labels[n]);
    return s;
}

} // namespace

TEST_CASE("logit-space gradient of the true-class probability") {
    Prediction pred;
    pred.logits = Tensor({1, 3});
    pred.logits.at2(0, 0) = 1.0;
    pred.logits.at2(0, 2) = -0.5;
    pred.probabilities = ops::softmax(pred.logits);
    Tensor y = one_hot({0}, 3);
    Tensor g = true_class_probability_grad(pred, y);
    const double p0 = pred.probabilities.at2(0, 0);
    CHECK(g.at2(0, 0) == doctest::Approx(p0 * (1.0 - p0)).epsilon(1e-12));
    for (int k = 1; k < 3; ++k)
        CHECK(g.at2(0, k) ==
              doctest::Approx(-p0 * pred.probabilities.at2(0, k)).epsilon(1e-12));
}

TEST_CASE("saliency at level 0 matches finite differences") {
    ModelGraph m = ModelGraph::build(2, {4, 8}, 3, {1, 8, 8}, 31);
    Tensor x = random_input(2, 1, 8, 8, 32);
    const std::vector<int> labels{1, 2};
    Tensor y = one_hot(labels, 3);

    AttributionMap map = saliency(m, x, y, 0);
    CHECK(map.values.shape == x.shape);
    CHECK(map.kind == MapKind::Elementwise);

    const double h = 1e-5;
    RngStream rng(33);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t i = rng.index(x.numel());
        Tensor xp = x, xm = x;
        xp.data[i] += h;
        xm.data[i] -= h;
        const double fd =
            (true_prob_sum(m, xp, labels) - true_prob_sum(m, xm, labels)) / (2.0 * h);
        CHECK(map.values.data[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("constant network output yields an all-zero saliency map") {
    ModelGraph m = ModelGraph::build(1, {4}, 3, {1, 8, 8}, 7);
    for (double& v : m.head_weight.data) v = 0.0; // logits no longer depend on the input
    Tensor x = random_input(2, 1, 8, 8, 8);
    AttributionMap map = saliency(m, x, one_hot({0, 1}, 3), 0);
    for (double v : map.values.data) CHECK(v == 0.0);
}

TEST_CASE("guided backprop equals saliency when every upstream gradient is positive") {
    ModelGraph m = ModelGraph::build(1, {2}, 2, {1, 4, 4}, 1);
    for (double& v : m.blocks[0].weight.data) v = 0.1; // positive pre-activations
    for (double& v : m.blocks[0].bias.data) v = 0.05;
    for (double& v : m.head_weight.data) v = 0.0;
    m.head_weight.at2(0, 0) = 1.0; // class-0 gradient is positive at the embedding
    m.head_weight.at2(0, 1) = 1.0;

    Tensor x = random_input(2, 1, 4, 4, 2);
    for (double& v : x.data) v += 0.1;
    Tensor y = one_hot({0, 0}, 2);
    AttributionMap sal = saliency(m, x, y, 0);
    AttributionMap gbp = guided_backprop(m, x, y, 0);
    for (std::size_t i = 0; i < sal.values.numel(); ++i)
        CHECK(gbp.values.data[i] == doctest::Approx(sal.values.data[i]).epsilon(1e-12));
}

TEST_CASE("guided backprop zeroes paths with a negative upstream gradient") {
    ModelGraph m = ModelGraph::build(1, {2}, 2, {1, 4, 4}, 1);
    for (double& v : m.blocks[0].weight.data) v = 0.1;
    for (double& v : m.head_weight.data) v = 0.0;
    m.head_weight.at2(0, 0) = -1.0; // class-0 gradient is negative at the embedding
    m.head_weight.at2(0, 1) = -1.0;

    Tensor x = random_input(1, 1, 4, 4, 3);
    for (double& v : x.data) v += 0.1;
    Tensor y = one_hot({0}, 2);
    AttributionMap sal = saliency(m, x, y, 0);
    AttributionMap gbp = guided_backprop(m, x, y, 0);
    double sal_norm = 0.0;
    for (double v : sal.values.data) sal_norm += std::abs(v);
    CHECK(sal_norm > 0.0); // standard gradient flows
    for (double v : gbp.values.data) CHECK(v == 0.0); // guided does not
}

TEST_CASE("dead ReLUs give all-zero maps at the input") {
    ModelGraph m = ModelGraph::build(1, {2}, 2, {1, 4, 4}, 4);
    for (double& v : m.blocks[0].bias.data) v = -100.0; // every pre-activation negative
    Tensor x = random_input(1, 1, 4, 4, 5);
    Tensor y = one_hot({1}, 2);
    for (double v : saliency(m, x, y, 0).values.data) CHECK(v == 0.0);
    for (double v : guided_backprop(m, x, y, 0).values.data) CHECK(v == 0.0);
    for (double v : grad_cam(m, x, y, 1).values.data) CHECK(v == 0.0);
}

TEST_CASE("grad_cam matches a direct evaluation of its formula") {
    ModelGraph m = ModelGraph::build(2, {4, 6}, 3, {1, 8, 8}, 41);
    Tensor x = random_input(2, 1, 8, 8, 42);
    Tensor y = one_hot({0, 2}, 3);

    for (int level = 1; level <= 2; ++level) {
        AttributionMap cam = grad_cam(m, x, y, level);
        CHECK(cam.kind == MapKind::Spatial);

        // recompute from the raw true-class score gradient and the recorded
        // representation
        ModelGraph copy = m;
        copy.forward(x);
        Gradients g = copy.backward(y, ReluMode::Standard);
        const Tensor& grad = g.level[level];
        const Tensor& repr = copy.recorded_level(level);
        const int N = repr.shape[0], C = repr.shape[1], H = repr.shape[2], W = repr.shape[3];
        CHECK(cam.values.shape == std::vector<int>{N, H, W});
        for (int n = 0; n < N; ++n) {
            std::vector<double> alpha(C, 0.0);
            for (int c = 0; c < C; ++c) {
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) alpha[c] += grad.at4(n, c, i, j);
                alpha[c] /= H * W;
            }
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c) acc += alpha[c] * repr.at4(n, c, i, j);
                    const double expect = acc > 0.0 ? acc : 0.0;
                    const double got =
                        cam.values.data[(static_cast<std::size_t>(n) * H + i) * W + j];
                    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
                    CHECK(got >= 0.0);
                }
        }
    }
}

TEST_CASE("grad_cam argmax survives positive rescaling of the last conv layer") {
    for (int trial = 0; trial < 10; ++trial) {
        ModelGraph m = ModelGraph::build(2, {4, 6}, 3, {1, 8, 8}, 900 + trial);
        Tensor x = random_input(1, 1, 8, 8, 950 + trial);
        RngStream rng(990 + trial);
        Tensor y = one_hot({static_cast<int>(rng.index(3))}, 3);
        AttributionMap base = grad_cam(m, x, y, 2);

        auto argmax = [](const Tensor& t) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < t.numel(); ++i)
                if (t.data[i] > t.data[best]) best = i;
            return best;
        };
        for (double k : {0.25, 0.5, 2.0, 8.0}) {
            ModelGraph scaled = m;
            for (double& v : scaled.blocks[1].weight.data) v *= k;
            for (double& v : scaled.blocks[1].bias.data) v *= k;
            AttributionMap map = grad_cam(scaled, x, y, 2);
            CHECK(argmax(map.values) == argmax(base.values));
        }
    }
}

TEST_CASE("grad_cam rejects the input level") {
    ModelGraph m = ModelGraph::build(1, {2}, 2, {1, 4, 4}, 6);
    Tensor x = random_input(1, 1, 4, 4, 7);
    CHECK_THROWS_AS(grad_cam(m, x, one_hot({0}, 2), 0), std::invalid_argument);
    CHECK_THROWS_AS(grad_cam(m, x, one_hot({0}, 2), 2), std::invalid_argument);
}

TEST_CASE("upsample_nearest block-replicates an integer upscale") {
    Tensor in({1, 2, 2});
    in.data = {1.0, 2.0, 3.0, 4.0};
    Tensor out = upsample_nearest(in, 4, 4);
    const double expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(out.data[i] == expect[i]);
}

TEST_CASE("guided grad_cam is the guided map gated by the cam") {
    ModelGraph m = ModelGraph::build(2, {4, 6}, 3, {1, 8, 8}, 51);
    Tensor x = random_input(2, 1, 8, 8, 52);
    Tensor y = one_hot({1, 0}, 3);

    // level >= 1: per-channel product with the same-level cam
    {
        AttributionMap ggc = guided_grad_cam(m, x, y, 1);
        AttributionMap gbp = guided_backprop(m, x, y, 1);
        AttributionMap cam = grad_cam(m, x, y, 1);
        const int N = gbp.values.shape[0], C = gbp.values.shape[1];
        const int H = gbp.values.shape[2], W = gbp.values.shape[3];
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const double expect =
                            gbp.values.at4(n, c, i, j) *
                            cam.values.data[(static_cast<std::size_t>(n) * H + i) * W + j];
                        CHECK(ggc.values.at4(n, c, i, j) ==
                              doctest::Approx(expect).epsilon(1e-12));
                    }
    }

    // level 0: cam comes from the last conv level, nearest-upsampled
    {
        AttributionMap ggc = guided_grad_cam(m, x, y, 0);
        AttributionMap gbp = guided_backprop(m, x, y, 0);
        Tensor cam = upsample_nearest(grad_cam(m, x, y, 2).values, 8, 8);
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) {
                    const double expect =
                        gbp.values.at4(n, 0, i, j) *
                        cam.data[(static_cast<std::size_t>(n) * 8 + i) * 8 + j];
                    CHECK(ggc.values.at4(n, 0, i, j) == doctest::Approx(expect).epsilon(1e-12));
                }
    }
}

TEST_CASE("attribution leaves the caller's model untouched") {
    ModelGraph m = ModelGraph::build(2, {4, 6}, 3, {1, 8, 8}, 61);
    const std::vector<double> before = m.parameters();
    CHECK_FALSE(m.has_recorded_forward());

    Tensor x = random_input(2, 1, 8, 8, 62);
    Tensor y = one_hot({0, 1}, 3);
    AttributionEngine engine(m, x, y);
    engine.saliency(0);
    engine.guided_backprop(1);
    engine.grad_cam(2);
    engine.guided_grad_cam(0);

    CHECK(m.parameters() == before);
    CHECK_FALSE(m.has_recorded_forward()); // the engine worked on its own copy
}

TEST_CASE("maps are computed per example, independent of batch company") {
    ModelGraph m = ModelGraph::build(2, {4, 6}, 3, {1, 8, 8}, 71);
    Tensor x = random_input(3, 1, 8, 8, 72);
    const std::vector<int> labels{2, 0, 1};
    Tensor y = one_hot(labels, 3);
    AttributionEngine batch_engine(m, x, y);

    for (AttributionMethod method : {AttributionMethod::Saliency,
                                     AttributionMethod::GuidedBackprop,
                                     AttributionMethod::GuidedGradCam}) {
        AttributionMap full = batch_engine.compute(method, 0);
        const std::size_t per = full.values.numel() / 3;
        for (int n = 0; n < 3; ++n) {
            Tensor single({1, 1, 8, 8});
            std::copy(x.data.begin() + n * per, x.data.begin() + (n + 1) * per,
                      single.data.begin());
            AttributionMap one =
                AttributionEngine(m, single, one_hot({labels[n]}, 3)).compute(method, 0);
            for (std::size_t i = 0; i < per; ++i)
                CHECK(one.values.data[i] ==
                      doctest::Approx(full.values.data[n * per + i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("engine constructions are counted") {
    ModelGraph m = ModelGraph::build(1, {2}, 2, {1, 4, 4}, 81);
    Tensor x = random_input(1, 1, 4, 4, 82);
    Tensor y = one_hot({0}, 2);
    const std::uint64_t before = attribution_pass_counter().load();
    AttributionEngine e1(m, x, y);
    e1.saliency(0);
    e1.guided_backprop(0); // same engine: no extra pass
    AttributionEngine e2(m, x, y);
    CHECK(attribution_pass_counter().load() == before + 2);
}

TEST_CASE("pgm export: normalization, header, constant maps") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "cmb_map.pgm").string();

    SUBCASE("min-max normalization hits 0 and 255") {
        const double vals[6] = {0.5, 1.0, 2.0, 3.0, 3.5, 2.5};
        write_pgm(path, vals, 2, 3);
        std::ifstream is(path, std::ios::binary);
        std::string header;
        std::getline(is, header);
        CHECK(header == "P5");
        int w = 0, h = 0, maxv = 0;
        is >> w >> h >> maxv;
        is.get(); // single whitespace after maxval
        CHECK(w == 3);
        CHECK(h == 2);
        CHECK(maxv == 255);
        unsigned char px[6];
        is.read(reinterpret_cast<char*>(px), 6);
        CHECK(px[0] == 0);   // min
        CHECK(px[4] == 255); // max
        CHECK(px[2] == 128); // (2.0 - 0.5) / 3.0 * 255 = 127.5 -> rounds to 128
    }

    SUBCASE("constant map renders mid-gray") {
        const double vals[4] = {7.0, 7.0, 7.0, 7.0};
        write_pgm(path, vals, 2, 2);
        std::ifstream is(path, std::ios::binary);
        std::string line;
        std::getline(is, line);
        std::getline(is, line);
        std::getline(is, line);
        unsigned char px[4];
        is.read(reinterpret_cast<char*>(px), 4);
        for (int i = 0; i < 4; ++i) CHECK(px[i] == 128);
    }

    std::remove(path.c_str());
}
