#include <cmath>
#include <map>

#include "doctest.h"
#include "ehrseq/model.hpp"
#include "fixtures.hpp"

using namespace ehrseq;
using test::random_sequence;

namespace {

ModelConfig desk(Preset p, int vocab = 60, int C = 16) {
    auto c = preset(p, Size::DeskTiny, vocab, C);
    c.dropout = 0.0;
    return c;
}

// Reference parameter counts in millions (Tiny, Small, Medium).
const std::map<Preset, std::array<double, 3>> kReferenceMillions{
    {Preset::BERT, {2.4, 11.2, 21.7}},   {Preset::MBERT_lite, {2.5, 13.1, 27.7}},
    {Preset::LLAMA, {3.6, 15.1, 29.8}},  {Preset::MAMBA, {2.0, 12.5, 22.6}},
    {Preset::MAMBA2, {3.2, 14.9, 25.2}},
};

Tensor loss_of(const SequenceModel& m, const std::vector<TokenizedSequence>& batch) {
    if (m.config().objective == Objective::NTP) return ntp_loss(m, batch);
    Rng rng(5);
    return mlm_loss(m, batch, 0.5, rng);
}

}  // namespace

TEST_CASE("parameter counts match the reference sizes within 15%") {
    for (const auto& [p, counts] : kReferenceMillions) {
        for (int s = 0; s < 3; ++s) {
            const auto cfg = preset(p, static_cast<Size>(s), 4470, 512);
            const double millions = static_cast<double>(SequenceModel(cfg, 1).count_parameters()) / 1e6;
            INFO(to_string(p), " ", to_string(static_cast<Size>(s)), " ", millions);
            CHECK(std::abs(millions / counts[static_cast<std::size_t>(s)] - 1.0) <= 0.15);
        }
    }
}

TEST_CASE("LLAMA DeskTiny count equals the closed form") {
    const auto cfg = preset(Preset::LLAMA, Size::DeskTiny, 100, 64);
    const std::int64_t d = 64, f = 128, V = 100, n = 2;
    const std::int64_t streams = V + kTypeRows + kAgeRows + kSexRows + kBmiRows + kTimeRows + kVisitRows + kSegmentRows;
    const std::int64_t per_layer = 4 * d * d + 3 * d * f + 2 * d;
    const std::int64_t closed = streams * d + n * per_layer + d + V * d;
    SequenceModel m(cfg, 3);
    CHECK(m.count_parameters() == closed);

    std::int64_t enumerated = 0;
    for (const auto& p : m.parameters()) {
        std::int64_t k = 1;
        for (auto s : p.value.shape()) k *= s;
        enumerated += k;
    }
    CHECK(enumerated == closed);
}

TEST_CASE("zero-layer config is embeddings and head only") {
    auto cfg = preset(Preset::BERT, Size::DeskTiny, 50, 8);
    cfg.n_m = 0;
    SequenceModel m(cfg, 1);
    const std::int64_t d = 64;
    const std::int64_t rows = 50 + kTypeRows + kAgeRows + kSexRows + kBmiRows + kTimeRows + kVisitRows + kSegmentRows + 8;
    CHECK(m.count_parameters() == rows * d + 2 * d + 50);
}

TEST_CASE("scalar-A config has one A per channel") {
    const auto cfg = desk(Preset::MAMBA2);
    SequenceModel m(cfg, 1);
    for (const auto& p : m.parameters()) {
        if (p.name.ends_with("A_log")) CHECK(p.value.shape() == Shape{cfg.d_inner(), 1});
    }
    SequenceModel mm(desk(Preset::MAMBA), 1);
    for (const auto& p : mm.parameters()) {
        if (p.name.ends_with("A_log")) CHECK(p.value.shape() == Shape{128, 16});
    }
}

TEST_CASE("preset validation") {
    auto c = desk(Preset::MAMBA);
    c.objective = Objective::MLM;
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
    auto b = desk(Preset::BERT);
    b.n_h = 3;
    CHECK_THROWS_AS(validate(b), std::invalid_argument);
    CHECK_THROWS_AS(parse_preset("GPT"), std::invalid_argument);
    CHECK(model_config_from_json(to_json(desk(Preset::LLAMA))).d_f == 128);
}

TEST_CASE("end-to-end loss gradients match finite differences for every preset") {
    for (Preset p : kAllPresets) {
        auto cfg = desk(p);
        cfg.d_m = 16, cfg.n_h = 2, cfg.d_f = 24, cfg.d_p = 8, cfg.n_state = 4;
        SequenceModel m(cfg, 11);
        // Perturb the constant-initialised parameters so every path is exercised.
        Rng jitter(2);
        for (auto& prm : m.parameters()) {
            for (Index i = 0; i < prm.value.numel(); ++i) prm.value.mutable_data()(i) += jitter.normal(0.0, 0.05);
        }
        const std::vector<TokenizedSequence> batch{random_sequence(60, 9, 12, 1), random_sequence(60, 12, 12, 2)};
        const Tensor loss = loss_of(m, batch);
        loss.backward();

        Rng pick(7);
        double worst = 0.0;
        int checked = 0;
        const double h = 1e-5;
        NoGradGuard guard;
        while (checked < 100) {
            auto& prm = m.parameters()[pick.below(m.parameters().size())];
            const auto i = static_cast<Index>(pick.below(static_cast<std::uint64_t>(prm.value.numel())));
            const double analytic = prm.value.grad().size() ? prm.value.grad().reshaped<Eigen::RowMajor>()(i) : 0.0;
            double& w = prm.value.mutable_data()(i);
            const double keep = w;
            w = keep + h;
            const double up = loss_of(m, batch).item();
            w = keep - h;
            const double down = loss_of(m, batch).item();
            w = keep;
            const double numeric = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric) + std::abs(analytic)));
            ++checked;
        }
        INFO(to_string(p), " worst ", worst);
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("causal configs ignore future tokens, bidirectional ones do not") {
    for (Preset p : kAllPresets) {
        SequenceModel m(desk(p), 4);
        auto s = random_sequence(60, 10, 10, 3);
        const Matrix before = m.forward(s).mat();
        s.concept_ids[6] = s.concept_ids[6] == 30 ? 31 : 30;
        const Matrix after = m.forward(s).mat();
        INFO(to_string(p));
        if (m.config().is_causal()) {
            CHECK((before.topRows(6) - after.topRows(6)).cwiseAbs().maxCoeff() == 0.0);
        } else {
            CHECK((before.row(0) - after.row(0)).cwiseAbs().maxCoeff() > 0.0);
        }
        CHECK((before.row(6) - after.row(6)).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("PAD extension leaves the rightmost real state and probability unchanged") {
    for (Preset p : kAllPresets) {
        SequenceModel m(desk(p), 5);
        ClassifierHead head(64, 6);
        const auto short_seq = random_sequence(60, 7, 7, 8);
        const auto long_seq = random_sequence(60, 7, 16, 8);
        const Matrix a = m.forward(short_seq).mat();
        const Matrix b = m.forward(long_seq).mat();
        INFO(to_string(p));
        CHECK((a.row(6) - b.row(6)).cwiseAbs().maxCoeff() < 1e-10);
        const auto pa = classify(m, head, {short_seq});
        const auto pb = classify(m, head, {long_seq});
        CHECK(std::abs(pa[0] - pb[0]) < 1e-10);
    }
}

TEST_CASE("forward is deterministic without dropout") {
    SequenceModel m(desk(Preset::MAMBA2), 9);
    const auto s = random_sequence(60, 12, 12, 4);
    CHECK((m.forward(s).mat() - m.forward(s).mat()).cwiseAbs().maxCoeff() == 0.0);
    const auto batch = m.forward_batch({s, s});
    CHECK(batch.shape() == Shape{2, 12, 64});
}

TEST_CASE("untrained losses are close to ln(V)") {
    const int V = 400;
    for (Preset p : kAllPresets) {
        SequenceModel m(desk(p, V, 32), 12);
        std::vector<TokenizedSequence> batch;
        for (int i = 0; i < 4; ++i) batch.push_back(random_sequence(V, 32, 32, 20 + static_cast<std::uint64_t>(i)));
        const double loss = loss_of(m, batch).item();
        INFO(to_string(p), " ", loss);
        CHECK(std::abs(loss / std::log(V) - 1.0) < 0.1);
    }
}

TEST_CASE("mlm corruption and loss bookkeeping") {
    const auto s = random_sequence(60, 12, 12, 3);
    Rng rng(1);
    CHECK_THROWS_AS(mlm_loss(SequenceModel(desk(Preset::BERT), 1), {s}, 0.0, rng), std::invalid_argument);

    Rng r2(4);
    const auto masked = mask_tokens(s, 60, 1.0, r2);
    int eligible = 0;
    for (std::size_t i = 0; i < s.size(); ++i) eligible += s.concept_ids[i] >= Vocabulary::kNumSpecials;
    CHECK(masked.count == eligible);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.concept_ids[i] < Vocabulary::kNumSpecials) CHECK(masked.targets[i] == -1);
    }

    // Large-sample corruption split.
    int n_mask = 0, n_keep = 0, n_total = 0;
    Rng r3(9);
    for (int k = 0; k < 300; ++k) {
        const auto mk = mask_tokens(random_sequence(60, 40, 40, 100 + static_cast<std::uint64_t>(k)), 60, 0.5, r3);
        for (std::size_t i = 0; i < mk.targets.size(); ++i) {
            if (mk.targets[i] < 0) continue;
            ++n_total;
            n_mask += mk.input.concept_ids[i] == Vocabulary::kMask;
            n_keep += mk.input.concept_ids[i] == mk.targets[i];
        }
    }
    CHECK(std::abs(static_cast<double>(n_mask) / n_total - 0.8) < 0.02);
    CHECK(static_cast<double>(n_keep) / n_total > 0.09);
}

TEST_CASE("hand-computed cross-entropy over a tiny model") {
    auto cfg = desk(Preset::LLAMA, 30, 4);
    cfg.n_m = 0;
    SequenceModel m(cfg, 2);
    const auto s = random_sequence(30, 3, 3, 1);
    const Matrix logits = m.logits(m.forward(s)).mat();
    double ref = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto row = logits.row(i);
        ref += std::log(row.array().exp().sum()) - row(s.concept_ids[static_cast<std::size_t>(i) + 1]);
    }
    CHECK(std::abs(ntp_loss(m, {s}).item() - ref / 2.0) < 1e-12);
    CHECK_THROWS_AS(ntp_loss(m, {random_sequence(30, 1, 3, 1)}), std::invalid_argument);
}

TEST_CASE("classifier head behaviour") {
    SequenceModel m(desk(Preset::BERT), 3);
    ClassifierHead head(64, 1);
    head.zero();
    const auto s = random_sequence(60, 8, 10, 2);
    CHECK(classify(m, head, {s})[0] == 0.5);
    CHECK_THROWS_AS(classify(m, head, {random_sequence(60, 0, 4, 1)}), std::invalid_argument);
    ClassifierHead h2(64, 2);
    const double p1 = classify(m, h2, {s})[0];
    h2.parameters()[3].value.mutable_data()(0) += 0.5;
    CHECK(classify(m, h2, {s})[0] > p1);
}

TEST_CASE("selective parameters") {
    SequenceModel m(desk(Preset::MAMBA), 3);
    Rng rng(1);
    Matrix x(6, 64);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const auto sp = selective_params(m, 0, x);
    CHECK(sp.delta.minCoeff() > 0.0);
    CHECK(sp.b.cols() == 16);
    CHECK_THROWS(selective_params(SequenceModel(desk(Preset::BERT), 1), 0, x));

    // Zero projections make the block time invariant: scan equals convolution.
    for (auto& p : m.parameters()) {
        if (p.name == "block0.in_proj.w" || p.name == "block0.x_proj.w") p.value.mutable_data().setZero();
        if (p.name == "block0.conv.b") p.value.mutable_data().setConstant(0.3);
    }
    const auto lti = selective_params(m, 0, x);
    CHECK((lti.delta.rowwise() - lti.delta.row(0)).cwiseAbs().maxCoeff() == 0.0);
    const Index N = 16;
    const double a0 = -1.0;
    Matrix abar(6, N), bbar(6, N), c(6, N);
    Eigen::VectorXd u(6);
    for (Index t = 0; t < 6; ++t) {
        u(t) = rng.normal();
        for (Index n = 0; n < N; ++n) {
            const auto z = discretize_zoh(a0 * static_cast<double>(n + 1), 1.0 + lti.b(t, n), lti.delta(t, 0));
            abar(t, n) = z.abar;
            bbar(t, n) = z.bbar;
            c(t, n) = 1.0 + lti.c(t, n);
        }
    }
    const Eigen::VectorXd scan = ssm_scan(u, abar, bbar, c);
    const Eigen::VectorXd conv = causal_convolve(u, conv_kernel(abar.row(0), bbar.row(0), c.row(0), 6));
    CHECK((scan - conv).cwiseAbs().maxCoeff() < 1e-10);
}
