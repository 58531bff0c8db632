// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fail. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ehrseq/autodiff.hpp"
#include "ehrseq/cohort.hpp"
#include "ehrseq/harness.hpp"
#include "ehrseq/kernels.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/sequence.hpp"
#include "ehrseq/trainer.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace ehrseq;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass{true};
    std::string detail;
};

/// Collects failures with a short reason each.
struct Checker {
    std::vector<std::string> failures;
    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    Outcome outcome(std::string detail) const {
        if (!failures.empty()) {
            detail += "; failed: " + failures.front();
            if (failures.size() > 1) detail += " (+" + std::to_string(failures.size() - 1) + " more)";
        }
        return {failures.empty(), detail};
    }
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Matrix random_matrix(Index r, Index c, Rng& rng) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

Tensor weighted_sum(const Tensor& y, Rng& rng) {
    return sum(mul(y, test::random_tensor(y.shape(), rng, 1.0, false)));
}

constexpr double kFdStep = 1e-5;

// 1. kernel oracle suite --------------------------------------------------

Outcome kernel_suite() {
    const auto t0 = Clock::now();
    Checker ck;
    Rng rng(101);
    double worst_fd = 0.0, worst_eq = 0.0;
    const int n = 20;
    auto fd = [&](const std::string& what, double err) {
        worst_fd = std::max(worst_fd, err);
        ck.expect(err < 1e-4, what + " gradient");
    };
    auto eq = [&](const std::string& what, double err) {
        worst_eq = std::max(worst_eq, err);
        ck.expect(err < 1e-10, what + " value");
    };

    for (int k = 0; k < n; ++k) {
        // matmul vs triple loop
        const Index m = 1 + static_cast<Index>(rng.below(5)), kk = 1 + static_cast<Index>(rng.below(5)),
                    p = 1 + static_cast<Index>(rng.below(5));
        const auto A = random_matrix(m, kk, rng), B = random_matrix(kk, p, rng);
        const auto C = matmul(Tensor::from(A), Tensor::from(B));
        double e = 0;
        for (Index i = 0; i < m; ++i) {
            for (Index j = 0; j < p; ++j) {
                double s = 0;
                for (Index t = 0; t < kk; ++t) s += A(i, t) * B(t, j);
                e = std::max(e, std::abs(C.mat()(i, j) - s));
            }
        }
        eq("matmul", e);
        Rng wr(k);
        fd("matmul", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(matmul(in[0], in[1]), r); },
                                     {Tensor::from(A, true), Tensor::from(B, true)}, kFdStep));
        fd("matmul_nt", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(matmul_nt(in[0], in[1]), r); },
                                        {Tensor::from(A, true), Tensor::from(Matrix(B.transpose()), true)}, kFdStep));

        // softmax vs direct formula
        const auto X = random_matrix(3, 5, rng);
        const auto S = softmax_rows(Tensor::from(X));
        e = 0;
        for (Index i = 0; i < 3; ++i) {
            double z = 0;
            for (Index j = 0; j < 5; ++j) z += std::exp(X(i, j));
            for (Index j = 0; j < 5; ++j) e = std::max(e, std::abs(S.mat()(i, j) - std::exp(X(i, j)) / z));
        }
        eq("softmax", e);
        fd("softmax", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(softmax_rows(in[0]), r); },
                                      {Tensor::from(X, true)}, kFdStep));

        // attention vs per-position brute force
        const Index L = 2 + static_cast<Index>(rng.below(5)), H = 2, dk = 3;
        const auto Q = random_matrix(L, H * dk, rng), K = random_matrix(L, H * dk, rng), V = random_matrix(L, H * dk, rng);
        for (bool causal : {false, true}) {
            const auto out = attention(Tensor::from(Q), Tensor::from(K), Tensor::from(V), H, causal);
            e = 0;
            for (Index h = 0; h < H; ++h) {
                for (Index i = 0; i < L; ++i) {
                    std::vector<double> w;
                    double z = 0;
                    const Index last = causal ? i : L - 1;
                    for (Index j = 0; j <= last; ++j) {
                        double s = 0;
                        for (Index t = 0; t < dk; ++t) s += Q(i, h * dk + t) * K(j, h * dk + t);
                        w.push_back(std::exp(s / std::sqrt(static_cast<double>(dk))));
                        z += w.back();
                    }
                    for (Index t = 0; t < dk; ++t) {
                        double o = 0;
                        for (Index j = 0; j <= last; ++j) o += w[static_cast<std::size_t>(j)] / z * V(j, h * dk + t);
                        e = std::max(e, std::abs(out.mat()(i, h * dk + t) - o));
                    }
                }
            }
            eq("attention", e);
            fd("attention", test::gradcheck(
                                [&](std::vector<Tensor>& in) {
                                    Rng r = wr;
                                    return weighted_sum(attention(in[0], in[1], in[2], H, causal), r);
                                },
                                {Tensor::from(Q, true), Tensor::from(K, true), Tensor::from(V, true)}, kFdStep));
        }

        // norms
        const auto Y = random_matrix(3, 6, rng);
        const auto g = test::random_tensor({6}, rng), b = test::random_tensor({6}, rng);
        const auto ln = layer_norm(Tensor::from(Y), Tensor::from(Shape{6}, Eigen::VectorXd::Ones(6)),
                                   Tensor::from(Shape{6}, Eigen::VectorXd::Zero(6)));
        for (Index i = 0; i < 3; ++i) eq("layer_norm mean", std::abs(ln.mat().row(i).mean()));
        const auto rms = rms_norm(Tensor::from(Matrix::Constant(1, 6, 0.5 + rng.uniform())),
                                  Tensor::from(Shape{6}, Eigen::VectorXd::Ones(6)), 0.0);
        eq("rms_norm constant row", (rms.mat().array() - 1.0).abs().maxCoeff());
        fd("layer_norm", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(layer_norm(in[0], in[1], in[2]), r); },
                                         {Tensor::from(Y, true), g, b}, kFdStep));
        fd("rms_norm", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(rms_norm(in[0], in[1]), r); },
                                       {Tensor::from(Y, true), g}, kFdStep));

        // activations
        const auto Z = random_matrix(2, 6, rng);
        for (auto [name, f] : std::initializer_list<std::pair<const char*, Tensor (*)(const Tensor&)>>{
                 {"gelu", &gelu}, {"silu", &silu}, {"geglu", &geglu}, {"swiglu", &swiglu}, {"softplus", &softplus}}) {
            fd(name, test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(f(in[0]), r); },
                                     {Tensor::from(Z, true)}, kFdStep));
        }

        // rope: identity at position 0, isometry, relative-position property
        const auto R = random_matrix(6, 8, rng), P = random_matrix(6, 8, rng);
        const auto rq = rope_rotate(R), rk = rope_rotate(P);
        eq("rope position 0", (rq.row(0) - R.row(0)).cwiseAbs().maxCoeff());
        for (Index i = 0; i < 6; ++i) eq("rope norm", std::abs(rq.row(i).norm() - R.row(i).norm()));
        const auto sq = rope_rotate(R, 10000.0, 5), sk = rope_rotate(P, 10000.0, 5);
        for (Index i = 0; i < 6; ++i) {
            for (Index j = 0; j < 6; ++j) eq("rope shift", std::abs(rq.row(i).dot(rk.row(j)) - sq.row(i).dot(sk.row(j))));
        }
        eq("rope op", (rope(Tensor::from(R), 1).mat() - rq).cwiseAbs().maxCoeff());
        fd("rope", test::gradcheck([&](std::vector<Tensor>& in) { Rng r = wr; return weighted_sum(rope(in[0], 2), r); },
                                   {Tensor::from(R, true)}, kFdStep));
    }
    const double secs = seconds_since(t0);
    ck.expect(secs < 60.0, "runtime");
    return ck.outcome(std::to_string(n) + " instances per kernel, worst fd rel err " + fmt("%.1e", worst_fd) +
                      ", worst equality err " + fmt("%.1e", worst_eq) + ", " + fmt("%.1f s", secs));
}

// 2. SSM equivalence -------------------------------------------------------

double expm1_over_z_series(double z) {
    double term = 1.0, s = 1.0;
    for (int k = 2; k < 40; ++k) {
        term *= z / k;
        s += term;
    }
    return s;
}

Outcome ssm_equivalence() {
    Checker ck;
    Rng rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Index L = 1 + static_cast<Index>(rng.below(64)), D = 1 + static_cast<Index>(rng.below(3)),
                    N = 1 + static_cast<Index>(rng.below(8));
        Matrix u(L, D), delta(L, D), a(D, N);
        Eigen::VectorXd bn(N), cn(N);
        for (Index n = 0; n < N; ++n) bn(n) = rng.normal(), cn(n) = rng.normal();
        Eigen::VectorXd dd(D);
        for (Index d = 0; d < D; ++d) {
            dd(d) = std::exp(rng.normal(-1.0, 1.0));
            for (Index n = 0; n < N; ++n) a(d, n) = -std::exp(rng.normal());
        }
        for (Index t = 0; t < L; ++t) {
            for (Index d = 0; d < D; ++d) u(t, d) = rng.normal(), delta(t, d) = dd(d);
        }
        const Matrix B = bn.transpose().replicate(L, 1), C = cn.transpose().replicate(L, 1);
        const auto y = selective_scan(Tensor::from(u), Tensor::from(delta), Tensor::from(a), Tensor::from(B),
                                      Tensor::from(C));
        for (Index d = 0; d < D; ++d) {
            Eigen::VectorXd abar(N), bbar(N);
            for (Index n = 0; n < N; ++n) {
                const auto z = discretize_zoh(a(d, n), bn(n), dd(d));
                abar(n) = z.abar;
                bbar(n) = z.bbar;
            }
            const Eigen::VectorXd x = u.col(d);
            const auto conv = causal_convolve(x, conv_kernel(abar, bbar, cn, L));
            const Matrix Ab = abar.transpose().replicate(L, 1), Bb = bbar.transpose().replicate(L, 1);
            const auto scan = ssm_scan(x, Ab, Bb, C);
            const double e1 = (scan - conv).cwiseAbs().maxCoeff();
            const double e2 = (Eigen::VectorXd(y.mat().col(d)) - conv).cwiseAbs().maxCoeff();
            worst = std::max({worst, e1, e2});
            ck.expect(e1 < 1e-10 && e2 < 1e-10, "scan vs conv");
        }
    }
    const auto z = discretize_zoh(-1.0, 1.0, 1.0);
    ck.expect(std::abs(z.abar - std::exp(-1.0)) < 1e-10, "zoh abar closed form");
    ck.expect(std::abs(z.bbar - (1.0 - std::exp(-1.0))) < 1e-10, "zoh bbar closed form");
    ck.expect(std::abs(z.bbar - expm1_over_z_series(-1.0)) < 1e-10, "zoh series oracle");
    for (double a : {-1e-3, -1e-7, -1e-12, 0.0}) {
        ck.expect(std::abs(discretize_zoh(a, 0.7, 0.5).bbar - 0.5 * 0.7 * expm1_over_z_series(0.5 * a)) < 1e-10,
                  "zoh small-a series");
    }
    ck.expect(std::abs(discretize_zoh(-1e-14, 0.7, 0.5).bbar - 0.35) < 1e-10, "zoh a->0 limit");
    return ck.outcome("50 LTI instances, L<=64, worst |scan - conv| " + fmt("%.1e", worst));
}

// 3. end-to-end gradcheck ------------------------------------------------

Outcome end_to_end_gradcheck() {
    const auto t0 = Clock::now();
    Checker ck;
    std::string detail;
    for (Preset p : kAllPresets) {
        auto cfg = preset(p, Size::DeskTiny, 60, 16);
        cfg.dropout = 0.0;
        SequenceModel m(cfg, 11);
        Rng jitter(2);
        for (auto& prm : m.parameters()) {
            for (Index i = 0; i < prm.value.numel(); ++i) prm.value.mutable_data()(i) += jitter.normal(0.0, 0.05);
        }
        const std::vector<TokenizedSequence> batch{test::random_sequence(60, 9, 12, 1),
                                                   test::random_sequence(60, 12, 12, 2)};
        auto loss_of = [&] {
            if (cfg.objective == Objective::NTP) return ntp_loss(m, batch);
            Rng r(5);
            return mlm_loss(m, batch, 0.5, r);
        };
        loss_of().backward();
        Rng pick(7);
        double worst = 0.0;
        NoGradGuard guard;
        for (int checked = 0; checked < 120; ++checked) {
            auto& prm = m.parameters()[pick.below(m.parameters().size())];
            const auto i = static_cast<Index>(pick.below(static_cast<std::uint64_t>(prm.value.numel())));
            const double analytic = prm.value.grad().size() ? prm.value.grad().reshaped<Eigen::RowMajor>()(i) : 0.0;
            double& w = prm.value.mutable_data()(i);
            const double keep = w;
            w = keep + kFdStep;
            const double up = loss_of().item();
            w = keep - kFdStep;
            const double down = loss_of().item();
            w = keep;
            const double numeric = (up - down) / (2 * kFdStep);
            worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric) + std::abs(analytic)));
        }
        ck.expect(worst < 1e-3, std::string(to_string(p)));
        detail += std::string(to_string(p)) + " " + fmt("%.1e", worst) + " ";
    }
    const double secs = seconds_since(t0);
    ck.expect(secs < 600.0, "runtime");
    return ck.outcome("120 sampled parameters per preset, worst rel err: " + detail + fmt("(%.1f s)", secs));
}

// 4. parameter counts ----------------------------------------------------

Outcome parameter_counts() {
    const std::map<Preset, std::array<double, 3>> reference{
        {Preset::BERT, {2.4, 11.2, 21.7}},  {Preset::MBERT_lite, {2.5, 13.1, 27.7}}, {Preset::LLAMA, {3.6, 15.1, 29.8}},
        {Preset::MAMBA, {2.0, 12.5, 22.6}}, {Preset::MAMBA2, {3.2, 14.9, 25.2}},
    };
    Checker ck;
    double worst = 0.0;
    for (const auto& [p, counts] : reference) {
        for (int s = 0; s < 3; ++s) {
            const auto cfg = preset(p, static_cast<Size>(s), 4470, 512);
            const double millions = static_cast<double>(SequenceModel(cfg, 1).count_parameters()) / 1e6;
            const double dev = std::abs(millions / counts[static_cast<std::size_t>(s)] - 1.0);
            worst = std::max(worst, dev);
            ck.expect(dev <= 0.15, std::string(to_string(p)) + " " + std::string(to_string(static_cast<Size>(s))));
        }
    }
    return ck.outcome("5 models x 3 sizes at V=4470, C=512, worst deviation " + fmt("%.1f%%", 100 * worst));
}

// 5. tokenizer invariants ------------------------------------------------

std::size_t merge_fixpoint(std::vector<std::pair<double, double>> spans) {
    for (bool changed = true; changed;) {
        changed = false;
        for (std::size_t k = 0; k + 1 < spans.size(); ++k) {
            if (spans[k + 1].first - spans[k].second < 1.0) {
                spans[k].second = std::max(spans[k].second, spans[k + 1].second);
                spans.erase(spans.begin() + static_cast<std::ptrdiff_t>(k) + 1);
                changed = true;
                break;
            }
        }
    }
    return spans.size();
}

Outcome tokenizer_invariants() {
    Checker ck;
    SynthConfig sc;
    sc.n_patients = 1000;
    sc.seed = 55;
    sc.signal = default_signal();
    const auto cohort = generate_cohort(sc);
    const auto vocab = Vocabulary::build(cohort, 10, 3);
    long n_tokens = 0;
    for (const auto& r : cohort) {
        std::vector<std::pair<double, double>> spans;
        for (const auto& e : r.encounters) spans.emplace_back(e.admit, e.discharge);
        const auto merged = merge_encounters(r);
        ck.expect(merged.encounters.size() == merge_fixpoint(spans), "merge fixpoint");
        ck.expect(merge_encounters(merged) == merged, "merge idempotent");

        const auto s = tokenize(r, vocab, 1 << 20, HistoryMode::cutoff());
        const int n = s.valid_length();
        n_tokens += n;
        // full grammar: [CLS] ( [ATT] )? [VS] event* [VE] [REG] ...
        std::size_t p = 0;
        auto id = [&](std::size_t k) { return s.concept_ids[k]; };
        bool ok = n > 0 && id(p++) == Vocabulary::kCls;
        int visits = 0;
        while (ok && static_cast<int>(p) < n) {
            if (visits > 0) ok = ok && s.type_ids[p++] == static_cast<int>(TokenType::ATT);
            ok = ok && id(p++) == Vocabulary::kVs;
            while (ok && static_cast<int>(p) < n &&
                   (s.type_ids[p] >= static_cast<int>(TokenType::DX) || s.type_ids[p] == static_cast<int>(TokenType::UNK))) {
                ++p;
            }
            ok = ok && static_cast<int>(p) + 1 < n && id(p) == Vocabulary::kVe && id(p + 1) == Vocabulary::kReg;
            p += 2;
            ++visits;
        }
        ck.expect(ok && visits == static_cast<int>(merged.encounters.size()), "grammar");

        const int cut = n;
        const int a1 = tokenize(r, vocab, 1 << 20, HistoryMode::aggregate(1)).valid_length();
        const int a2 = tokenize(r, vocab, 1 << 20, HistoryMode::aggregate(2)).valid_length();
        ck.expect(a2 <= a1 && a1 <= cut, "Agg2 <= Agg1 <= Cutoff");
        const auto t0 = tokenize(r, vocab, 1 << 20, HistoryMode::truncate(0));
        for (int k = 0; k < t0.valid_length(); ++k) {
            ck.expect(t0.visit_ids[static_cast<std::size_t>(k)] == 1, "Truncate0 single visit");
            ck.expect(t0.type_ids[static_cast<std::size_t>(k)] != static_cast<int>(TokenType::ATT), "Truncate0 no ATT");
        }
    }
    for (int d = 0; d <= 400; ++d) {
        std::string expect = d < 28 ? "[W" + std::to_string(d / 7) + "]"
                                    : (d < 360 ? "[M" + std::to_string(std::max(1, d / 30)) + "]" : "[LT]");
        ck.expect(att_token(d) == expect, "ATT table at " + std::to_string(d));
    }
    return ck.outcome("1000 patients, " + std::to_string(n_tokens) + " tokens, ATT table 0..400 days");
}

// 6. metric fixtures -----------------------------------------------------

Outcome metric_fixtures() {
    Checker ck;
    const std::vector<int> y{1, 0, 1, 0};
    ck.expect(auroc(y, std::vector<double>{0.9, 0.8, 0.7, 0.1}) == 0.75, "auroc fixture");
    const std::vector<int> y5{1, 0, 0, 1, 1};
    ck.expect(brier(y5, std::vector<double>(5, 0.5)) == 0.25, "brier fixture");
    Rng rng(606);
    std::vector<int> big;
    std::vector<double> s;
    for (int k = 0; k < 10000; ++k) {
        big.push_back(rng.bernoulli(0.25));
        s.push_back(rng.uniform());
    }
    const double prev = static_cast<double>(std::count(big.begin(), big.end(), 1)) / 1e4;
    const double ap = auprc(big, s);
    ck.expect(std::abs(ap - prev) <= 0.03, "random auprc");
    const MetricFn m = [](std::span<const int> a, std::span<const double> b) { return auprc(a, b); };
    const auto i1 = bootstrap_ci(m, big, s, 200, 0.95, 42);
    const auto i2 = bootstrap_ci(m, big, s, 200, 0.95, 42);
    ck.expect(i1.lo == i2.lo && i1.hi == i2.hi, "bootstrap determinism");
    return ck.outcome("random auprc " + fmt("%.4f", ap) + " vs prevalence " + fmt("%.4f", prev));
}

// 7 and 8 share the harness run path ------------------------------------

HarnessConfig learning_config(const SynthConfig& cohort, int batch, int finetune_epochs = 5, int finetune_patience = 2) {
    HarnessConfig c;
    c.cohort = cohort;
    c.train.pretrain_epochs = 5;
    c.train.pretrain_patience = 4;
    c.train.finetune_epochs = finetune_epochs;
    c.train.finetune_patience = finetune_patience;
    c.train.lr = 1e-3;
    c.train.batch_size = batch;
    c.train.dropout = 0.1;
    c.split.seed = 1;
    c.defaults.context = 128;
    c.defaults.size = Size::DeskTiny;
    c.bootstrap_iters = 200;
    return c;
}

RunSpec learning_spec(const std::string& model) {
    RunSpec s;
    s.ablation = "acceptance";
    s.task = "T2";
    s.model = model;
    s.context = 128;
    s.size = Size::DeskTiny;
    s.seed = 0;
    return s;
}

SynthConfig presence_cohort() {
    SynthConfig sc;
    sc.n_patients = 2000;
    sc.seed = 11;
    sc.target_median_tokens = 30;
    sc.signal = default_signal();
    for (auto& rc : sc.signal.risk_codes) rc.weight = 8.0;
    sc.signal.carrier_rate = 0.15;
    sc.signal.order_pair.bonus = 0.5;
    return sc;
}

SynthConfig order_cohort(double bonus) {
    SynthConfig sc;
    sc.n_patients = 2000;
    sc.seed = 11;
    sc.target_median_tokens = 153;
    sc.signal = default_signal();
    sc.signal.pair_rate = 0.6;
    sc.signal.order_pair.bonus = bonus;
    return sc;
}

Outcome learning_works() {
    const auto t0 = Clock::now();
    Checker ck;
    const auto cfg = learning_config(presence_cohort(), 16);
    const auto cohort = generate_cohort(cfg.cohort);
    const double bayes = bayes_rate(cfg.cohort, 100000, "T2");
    const RunContext ctx{&cfg, &cohort, cohort_hash(cohort)};
    std::string detail = "bayes " + fmt("%.4f", bayes) + ";";
    for (Preset p : kAllPresets) {
        const auto row = run(learning_spec(std::string(to_string(p))), ctx);
        const double ratio = row.report.auroc.point / bayes;
        ck.expect(ratio >= 0.95, std::string(to_string(p)) + " at " + fmt("%.3f", ratio));
        detail += " " + std::string(to_string(p)) + " " + fmt("%.3f", ratio);
        std::fflush(stdout);
    }
    const double secs = seconds_since(t0);
    ck.expect(secs < 1800.0, "runtime");
    return ck.outcome(detail + " of bayes AUROC (" + fmt("%.0f s", secs) + ")");
}

Outcome trend_reproduction() {
    const auto t0 = Clock::now();
    Checker ck;
    const auto cfg = learning_config(order_cohort(6.0), 8, 10, 4);
    const auto cohort = generate_cohort(cfg.cohort);
    const RunContext ctx{&cfg, &cohort, cohort_hash(cohort)};
    const double gbdt = run(learning_spec("GBDT"), ctx).report.auprc.point;
    std::string detail = "GBDT auprc " + fmt("%.3f", gbdt) + ";";
    for (Preset p : kAllPresets) {
        const double a = run(learning_spec(std::string(to_string(p))), ctx).report.auprc.point;
        ck.expect(a >= gbdt + 0.05, std::string(to_string(p)) + " gap " + fmt("%+.3f", a - gbdt));
        detail += " " + std::string(to_string(p)) + " " + fmt("%+.3f", a - gbdt);
    }
    // Control without the order bonus: reported, not gated.
    const auto ctl_cfg = learning_config(order_cohort(0.0), 8, 10, 4);
    const auto ctl = generate_cohort(ctl_cfg.cohort);
    const RunContext ctl_ctx{&ctl_cfg, &ctl, cohort_hash(ctl)};
    const double g0 = run(learning_spec("GBDT"), ctl_ctx).report.auprc.point;
    const double l0 = run(learning_spec("LLAMA"), ctl_ctx).report.auprc.point;
    detail += "; no-bonus control LLAMA-GBDT " + fmt("%+.3f", l0 - g0);
    return ck.outcome(detail + " (" + fmt("%.0f s", seconds_since(t0)) + ")");
}

// 9. split and leakage ---------------------------------------------------

Outcome split_leakage() {
    Checker ck;
    SynthConfig sc = presence_cohort();
    const auto cohort = generate_cohort(sc);
    int worst_dev_tenths = 0;
    for (const char* task : {"T1", "T2", "T3"}) {
        double pos = 0;
        for (const auto& r : cohort) pos += r.labels.at(task);
        const double p = pos / static_cast<double>(cohort.size());
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            for (double ratio : {0.25, 0.5, 0.75, 1.0}) {
                SplitSpec spec;
                spec.seed = seed;
                spec.stratify_by = task;
                spec.train_ratio = ratio;
                const auto s = stratified_split(cohort, spec);
                try {
                    assert_disjoint(s);
                } catch (const std::logic_error&) {
                    ck.expect(false, "disjointness");
                }
                std::set<std::string> train(s.train.begin(), s.train.end()), val(s.val.begin(), s.val.end()),
                    test(s.test.begin(), s.test.end());
                for (const auto* part : {&train, &val, &test}) {
                    if (ratio < 1.0 && part == &train) continue;
                    double k = 0;
                    for (const auto& r : cohort) k += part->count(r.id) ? r.labels.at(task) : 0;
                    const double dev = std::abs(k - p * static_cast<double>(part->size()));
                    worst_dev_tenths = std::max(worst_dev_tenths, static_cast<int>(dev * 10));
                    ck.expect(dev <= 1.0, std::string("prevalence in ") + task);
                }
            }
        }
    }
    std::string sizes;
    double last = 0;
    for (double ratio : {0.25, 0.5, 0.75, 1.0}) {
        std::vector<double> n;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            SplitSpec spec;
            spec.seed = seed;
            spec.train_ratio = ratio;
            n.push_back(static_cast<double>(stratified_split(cohort, spec).train.size()));
        }
        const double med = quantile(n, 0.5);
        ck.expect(med >= last, "train ratio monotone");
        last = med;
        sizes += " " + fmt("%.0f", med);
    }
    return ck.outcome("worst prevalence deviation " + fmt("%.1f", worst_dev_tenths / 10.0) +
                      " samples; median train sizes at 25/50/75/100%:" + sizes +
                      "; every harness run asserts disjointness");
}

// 10. harness determinism and resumability -------------------------------

Outcome harness_determinism() {
    const auto t0 = Clock::now();
    Checker ck;
    HarnessConfig cfg;
    cfg.cohort.n_patients = 300;
    cfg.cohort.seed = 21;
    cfg.cohort.target_median_tokens = 40;
    cfg.cohort.signal = default_signal();
    cfg.train.pretrain_epochs = 2;
    cfg.train.pretrain_patience = 1;
    cfg.train.finetune_epochs = 2;
    cfg.train.finetune_patience = 1;
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 16;
    cfg.defaults.context = 128;
    cfg.defaults.size = Size::DeskTiny;
    cfg.bootstrap_iters = 200;
    ExperimentGrid g;
    g.name = "history";
    g.axis = Axis::History;
    g.models = {"GBDT", "BERT", "MBERT_lite", "LLAMA", "MAMBA", "MAMBA2"};
    g.history = {"Cutoff", "Agg1d"};
    cfg.ablations = {g};

    const auto base = fs::temp_directory_path() / "ehrseq_acceptance_harness";
    fs::remove_all(base);
    AblateOptions first;
    first.out_dir = base / "first";
    const auto a = ablate(cfg, first);
    ck.expect(a.complete && a.executed == 12, "first run complete");

    AblateOptions second;
    second.out_dir = base / "second";
    second.jobs = 2;
    second.max_new_runs = 5;
    const auto cut = ablate(cfg, second);
    ck.expect(!cut.complete && cut.executed == 5, "interruption");
    ck.expect(!fs::exists(second.out_dir / "results.csv"), "no partial results.csv");
    second.max_new_runs = -1;
    second.resume = true;
    const auto resumed = ablate(cfg, second);
    ck.expect(resumed.complete && resumed.skipped == 5 && resumed.executed == 7, "resume");
    for (const char* f : {"results.csv", "manifest.json", "figures/history.svg"}) {
        ck.expect(read_file(first.out_dir / f) == read_file(second.out_dir / f), std::string("identical ") + f);
    }
    const std::string hash = hex64(fnv1a(read_file(first.out_dir / "results.csv")));
    fs::remove_all(base);
    return ck.outcome("12-run history ablation, interrupted after 5 and resumed with 2 jobs; results.csv " + hash +
                      " identical (" + fmt("%.0f s", seconds_since(t0)) + ")");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"kernel oracle suite", kernel_suite},
        {"SSM scan/convolution equivalence", ssm_equivalence},
        {"end-to-end gradcheck", end_to_end_gradcheck},
        {"parameter-count fidelity", parameter_counts},
        {"tokenizer invariants", tokenizer_invariants},
        {"metric fixtures", metric_fixtures},
        {"learning works", learning_works},
        {"sequence models beat GBDT on order signal", trend_reproduction},
        {"split and leakage", split_leakage},
        {"harness determinism and resumability", harness_determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
