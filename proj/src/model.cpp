#include "ehrseq/model.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace ehrseq {
namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, std::string_view> (&table)[N], const char* what) {
    for (const auto& [e, name] : table) {
        if (name == s) return e;
    }
    throw std::invalid_argument(std::string{"unknown "} + what + ": " + std::string{s});
}

template <typename E, std::size_t N>
std::string_view enum_name(E e, const std::pair<E, std::string_view> (&table)[N]) {
    for (const auto& [v, name] : table) {
        if (v == e) return name;
    }
    return "?";
}

constexpr std::pair<Preset, std::string_view> kPresetNames[] = {
    {Preset::BERT, "BERT"}, {Preset::MBERT_lite, "MBERT_lite"}, {Preset::LLAMA, "LLAMA"},
    {Preset::MAMBA, "MAMBA"}, {Preset::MAMBA2, "MAMBA2"}};
constexpr std::pair<Size, std::string_view> kSizeNames[] = {
    {Size::Tiny, "Tiny"}, {Size::Small, "Small"}, {Size::Medium, "Medium"}, {Size::DeskTiny, "DeskTiny"}};
constexpr std::pair<Mixer, std::string_view> kMixerNames[] = {
    {Mixer::AttentionBidirectional, "Attention-bidirectional"},
    {Mixer::AttentionCausal, "Attention-causal"},
    {Mixer::SsmSelective, "SSM-selective"},
    {Mixer::SsmScalarA, "SSM-scalarA"}};
constexpr std::pair<Objective, std::string_view> kObjectiveNames[] = {{Objective::MLM, "MLM"},
                                                                      {Objective::NTP, "NTP"}};
constexpr std::pair<PosEncoding, std::string_view> kPosNames[] = {
    {PosEncoding::Absolute, "Absolute"}, {PosEncoding::RoPE, "RoPE"}, {PosEncoding::None, "None"}};
constexpr std::pair<NormKind, std::string_view> kNormNames[] = {{NormKind::LayerNormPost, "LayerNorm-post"},
                                                                {NormKind::LayerNormPre, "LayerNorm-pre"},
                                                                {NormKind::RMSNormPre, "RMSNorm-pre"}};
constexpr std::pair<Activation, std::string_view> kActNames[] = {{Activation::GeLU, "GeLU"},
                                                                 {Activation::GeGLU, "GeGLU"},
                                                                 {Activation::SwiGLU, "SwiGLU"},
                                                                 {Activation::SiLU, "SiLU"}};

constexpr double kInitSd = 0.02;

std::string layer_prefix(const char* kind, int i) { return std::string{kind} + std::to_string(i) + "."; }

}  // namespace

std::string_view to_string(Preset p) { return enum_name(p, kPresetNames); }
std::string_view to_string(Size s) { return enum_name(s, kSizeNames); }
Preset parse_preset(std::string_view s) { return parse_enum(s, kPresetNames, "preset"); }
Size parse_size(std::string_view s) { return parse_enum(s, kSizeNames, "size"); }

void validate(const ModelConfig& c) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
    if (c.is_ssm() && c.objective != Objective::NTP) fail("SSM mixers are trained with NTP");
    if (c.mixer == Mixer::AttentionBidirectional && c.objective != Objective::MLM) {
        fail("bidirectional attention is trained with MLM");
    }
    if (c.d_m < 1 || c.n_h < 1 || c.d_m % c.n_h != 0) fail("d_m must be divisible by n_h");
    if (c.pos == PosEncoding::RoPE && (c.d_m / c.n_h) % 2 != 0) fail("RoPE needs an even head dimension");
    if (c.n_m < 0 || c.n_b < 0 || c.d_f < 1) fail("layer counts and d_f");
    if (c.is_ssm() && c.pos != PosEncoding::None) fail("SSM mixers take no position encoding");
    if (c.is_ssm() && (c.n_state < 1 || c.d_conv < 1 || c.expand < 1)) fail("SSM sizes");
    if (c.mixer == Mixer::SsmScalarA && (c.d_p < 1 || c.d_inner() % c.d_p != 0)) fail("d_inner must be divisible by d_p");
    if (c.vocab_size <= Vocabulary::kNumSpecials) fail("vocab_size");
    if (c.context_length < 1) fail("context_length");
    if (c.dropout < 0.0 || c.dropout >= 1.0) fail("dropout");
}

ModelConfig preset(Preset name, Size size, int vocab_size, int context_length) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.context_length = context_length;
    switch (size) {
        case Size::Tiny: c.d_m = 256, c.n_m = 2, c.n_h = 4, c.n_b = 2, c.d_f = 512, c.d_p = 32; break;
        case Size::Small: c.d_m = 512, c.n_m = 4, c.n_h = 4, c.n_b = 6, c.d_f = 1024, c.d_p = 64; break;
        case Size::Medium: c.d_m = 512, c.n_m = 6, c.n_h = 8, c.n_b = 12, c.d_f = 2048, c.d_p = 64; break;
        case Size::DeskTiny: c.d_m = 64, c.n_m = 2, c.n_h = 2, c.n_b = 2, c.d_f = 128, c.d_p = 32; break;
    }
    switch (name) {
        case Preset::BERT:
            c.mixer = Mixer::AttentionBidirectional, c.objective = Objective::MLM, c.pos = PosEncoding::Absolute;
            c.norm = NormKind::LayerNormPost, c.act = Activation::GeLU;
            c.linear_bias = true, c.tie_embeddings = true, c.head_bias = true;
            break;
        case Preset::MBERT_lite:
            c.mixer = Mixer::AttentionBidirectional, c.objective = Objective::MLM, c.pos = PosEncoding::RoPE;
            c.norm = NormKind::LayerNormPre, c.act = Activation::GeGLU;
            c.tie_embeddings = true, c.head_bias = true;
            break;
        case Preset::LLAMA:
            c.mixer = Mixer::AttentionCausal, c.objective = Objective::NTP, c.pos = PosEncoding::RoPE;
            c.norm = NormKind::RMSNormPre, c.act = Activation::SwiGLU;
            break;
        case Preset::MAMBA:
            c.mixer = Mixer::SsmSelective, c.objective = Objective::NTP, c.pos = PosEncoding::None;
            c.norm = NormKind::RMSNormPre, c.act = Activation::SiLU;
            c.tie_embeddings = true;
            break;
        case Preset::MAMBA2:
            c.mixer = Mixer::SsmScalarA, c.objective = Objective::NTP, c.pos = PosEncoding::None;
            c.norm = NormKind::RMSNormPre, c.act = Activation::SiLU;
            break;
    }
    validate(c);
    return c;
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"mixer", enum_name(c.mixer, kMixerNames)},
            {"objective", enum_name(c.objective, kObjectiveNames)},
            {"pos", enum_name(c.pos, kPosNames)},
            {"norm", enum_name(c.norm, kNormNames)},
            {"act", enum_name(c.act, kActNames)},
            {"d_m", c.d_m},
            {"d_f", c.d_f},
            {"n_m", c.n_m},
            {"n_h", c.n_h},
            {"n_b", c.n_b},
            {"n_state", c.n_state},
            {"d_conv", c.d_conv},
            {"expand", c.expand},
            {"d_p", c.d_p},
            {"context_length", c.context_length},
            {"vocab_size", c.vocab_size},
            {"dropout", c.dropout},
            {"linear_bias", c.linear_bias},
            {"tie_embeddings", c.tie_embeddings},
            {"head_bias", c.head_bias},
            {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.mixer = parse_enum(j.at("mixer").get<std::string>(), kMixerNames, "mixer");
    c.objective = parse_enum(j.at("objective").get<std::string>(), kObjectiveNames, "objective");
    c.pos = parse_enum(j.at("pos").get<std::string>(), kPosNames, "pos");
    c.norm = parse_enum(j.at("norm").get<std::string>(), kNormNames, "norm");
    c.act = parse_enum(j.at("act").get<std::string>(), kActNames, "act");
    j.at("d_m").get_to(c.d_m);
    j.at("d_f").get_to(c.d_f);
    j.at("n_m").get_to(c.n_m);
    j.at("n_h").get_to(c.n_h);
    j.at("n_b").get_to(c.n_b);
    j.at("n_state").get_to(c.n_state);
    j.at("d_conv").get_to(c.d_conv);
    j.at("expand").get_to(c.expand);
    j.at("d_p").get_to(c.d_p);
    j.at("context_length").get_to(c.context_length);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("dropout").get_to(c.dropout);
    j.at("linear_bias").get_to(c.linear_bias);
    j.at("tie_embeddings").get_to(c.tie_embeddings);
    j.at("head_bias").get_to(c.head_bias);
    j.at("rope_base").get_to(c.rope_base);
    validate(c);
    return c;
}

std::int64_t count_parameters(const ParameterList& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
}

Tensor SequenceModel::add_param(const std::string& name, Shape shape, double init_sd, bool decay, Rng& rng) {
    Index n = 1;
    for (auto s : shape) n *= s;
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i) v(i) = rng.normal(0.0, init_sd);
    auto t = Tensor::from(std::move(shape), std::move(v), true);
    index_[name] = params_.size();
    params_.push_back({name, t, decay});
    return t;
}

Tensor SequenceModel::add_const(const std::string& name, Shape shape, double value, bool decay) {
    Index n = 1;
    for (auto s : shape) n *= s;
    auto t = Tensor::from(std::move(shape), Eigen::VectorXd::Constant(n, value), true);
    index_[name] = params_.size();
    params_.push_back({name, t, decay});
    return t;
}

const Tensor& SequenceModel::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::logic_error("no parameter " + name);
    return params_[it->second].value;
}

SequenceModel::SequenceModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(seed);
    const Index d = cfg_.d_m;
    const bool layer_norm = cfg_.norm != NormKind::RMSNormPre;
    auto add_norm = [&](const std::string& prefix, Index width) {
        add_const(prefix + ".g", {width}, 1.0, false);
        if (layer_norm) add_const(prefix + ".b", {width}, 0.0, false);
    };
    auto add_linear = [&](const std::string& prefix, Index in, Index out, bool bias) {
        add_param(prefix + ".w", {in, out}, kInitSd, true, rng);
        if (bias) add_const(prefix + ".b", {out}, 0.0, false);
    };

    add_param("emb.concept", {cfg_.vocab_size, d}, kInitSd, true, rng);
    add_param("emb.type", {kTypeRows, d}, kInitSd, true, rng);
    add_param("emb.age", {kAgeRows, d}, kInitSd, true, rng);
    add_param("emb.sex", {kSexRows, d}, kInitSd, true, rng);
    add_param("emb.bmi", {kBmiRows, d}, kInitSd, true, rng);
    add_param("emb.time", {kTimeRows, d}, kInitSd, true, rng);
    add_param("emb.visit", {kVisitRows, d}, kInitSd, true, rng);
    add_param("emb.segment", {kSegmentRows, d}, kInitSd, true, rng);
    if (cfg_.pos == PosEncoding::Absolute) add_param("emb.position", {cfg_.context_length, d}, kInitSd, true, rng);
    if (layer_norm) add_norm("emb.norm", d);

    if (!cfg_.is_ssm()) {
        const bool gated = cfg_.act == Activation::GeGLU || cfg_.act == Activation::SwiGLU;
        for (int i = 0; i < cfg_.n_m; ++i) {
            const auto p = layer_prefix("layer", i);
            for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) add_linear(p + proj, d, d, cfg_.linear_bias);
            add_norm(p + "norm1", d);
            add_linear(p + "ffn.in", d, gated ? 2 * cfg_.d_f : cfg_.d_f, cfg_.linear_bias);
            add_linear(p + "ffn.out", cfg_.d_f, d, cfg_.linear_bias);
            add_norm(p + "norm2", d);
        }
    } else {
        const Index di = cfg_.d_inner(), N = cfg_.n_state, K = cfg_.d_conv;
        const double conv_sd = 1.0 / std::sqrt(3.0 * static_cast<double>(K));
        auto dt_bias = [&](Index n) {
            Eigen::VectorXd v(n);
            for (Index c = 0; c < n; ++c) {
                const double dt = std::exp(std::log(1e-3) + rng.uniform() * (std::log(1e-1) - std::log(1e-3)));
                v(c) = dt + std::log(-std::expm1(-dt));  // inverse softplus
            }
            return v;
        };
        for (int i = 0; i < cfg_.n_b; ++i) {
            const auto p = layer_prefix("block", i);
            add_norm(p + "norm", d);
            if (cfg_.mixer == Mixer::SsmSelective) {
                const Index r = cfg_.dt_rank();
                add_linear(p + "in_proj", d, 2 * di, false);
                add_param(p + "conv.w", {di, K}, conv_sd, true, rng);
                add_const(p + "conv.b", {di}, 0.0, false);
                add_linear(p + "x_proj", di, r + 2 * N, false);
                add_param(p + "dt_proj.w", {r, di}, 1.0 / std::sqrt(3.0 * static_cast<double>(r)), true, rng);
                add_const(p + "dt_proj.b", {di}, 0.0, false).mutable_data() = dt_bias(di);
                auto a_log = add_const(p + "A_log", {di, N}, 0.0, false);
                for (Index c = 0; c < di; ++c) {
                    for (Index n = 0; n < N; ++n) a_log.mutable_mat()(c, n) = std::log(static_cast<double>(n + 1));
                }
                add_const(p + "D", {di}, 1.0, false);
            } else {
                const Index H = cfg_.ssm_heads();
                add_linear(p + "in_proj", d, 2 * di + 2 * N + H, false);
                add_param(p + "conv.w", {di + 2 * N, K}, conv_sd, true, rng);
                add_const(p + "conv.b", {di + 2 * N}, 0.0, false);
                add_const(p + "dt_bias", {H}, 0.0, false).mutable_data() = dt_bias(H);
                auto a_log = add_const(p + "A_log", {di, 1}, 0.0, false);
                for (Index c = 0; c < di; ++c) a_log.mutable_data()(c) = std::log(1.0 + 15.0 * rng.uniform());
                add_const(p + "D", {H}, 1.0, false);
                add_const(p + "gate_norm.g", {di}, 1.0, false);
            }
            add_linear(p + "out_proj", di, d, false);
        }
        if (cfg_.mixer == Mixer::SsmScalarA) {
            for (Index c = 0; c < di; ++c) head_of_channel_.push_back(static_cast<int>(c / cfg_.d_p));
        }
        state_cols_.assign(static_cast<std::size_t>(N), 0);
    }

    if (cfg_.norm != NormKind::LayerNormPost) add_norm("final_norm", d);
    if (!cfg_.tie_embeddings) add_param("lm_head.w", {cfg_.vocab_size, d}, kInitSd, true, rng);
    if (cfg_.head_bias) add_const("lm_head.b", {cfg_.vocab_size}, 0.0, false);
}

void SequenceModel::set_dropout(double p) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
    cfg_.dropout = p;
}

Tensor SequenceModel::embed(const TokenizedSequence& seq) const {
    std::vector<Tensor> tables{param("emb.concept"), param("emb.type"), param("emb.age"),
                               param("emb.sex"),     param("emb.bmi"),  param("emb.time"),
                               param("emb.visit"),   param("emb.segment")};
    std::vector<std::span<const int>> ids{seq.concept_ids, seq.type_ids, seq.age_ids,
                                          seq.sex_ids,     seq.bmi_ids,  seq.time_week_ids,
                                          seq.visit_ids,   seq.segment_ids};
    if (cfg_.pos == PosEncoding::Absolute) {
        tables.push_back(param("emb.position"));
        ids.emplace_back(seq.position_ids);
    }
    return embedding_sum(tables, ids);
}

Tensor SequenceModel::norm(const std::string& prefix, const Tensor& x) const {
    if (cfg_.norm == NormKind::RMSNormPre) return rms_norm(x, param(prefix + ".g"));
    return layer_norm(x, param(prefix + ".g"), param(prefix + ".b"));
}

Tensor SequenceModel::linear(const std::string& name, const Tensor& x, bool bias) const {
    Tensor y = matmul(x, param(name + ".w"));
    return bias ? add_row(y, param(name + ".b")) : y;
}

Tensor SequenceModel::transformer_layer(int i, const Tensor& x, std::span<const bool> key_mask, Rng* rng) const {
    const auto p = layer_prefix("layer", i);
    const bool bias = cfg_.linear_bias;
    auto drop = [&](const Tensor& t) { return rng ? dropout(t, cfg_.dropout, *rng) : t; };
    auto attn = [&](const Tensor& in) {
        Tensor q = linear(p + "attn.q", in, bias);
        Tensor k = linear(p + "attn.k", in, bias);
        Tensor v = linear(p + "attn.v", in, bias);
        if (cfg_.pos == PosEncoding::RoPE) {
            q = rope(q, cfg_.n_h, cfg_.rope_base);
            k = rope(k, cfg_.n_h, cfg_.rope_base);
        }
        return linear(p + "attn.o", attention(q, k, v, cfg_.n_h, cfg_.is_causal(), key_mask), bias);
    };
    auto ffn = [&](const Tensor& in) {
        Tensor u = linear(p + "ffn.in", in, bias);
        switch (cfg_.act) {
            case Activation::GeLU: u = gelu(u); break;
            case Activation::SiLU: u = silu(u); break;
            case Activation::GeGLU: u = geglu(u); break;
            case Activation::SwiGLU: u = swiglu(u); break;
        }
        return linear(p + "ffn.out", u, bias);
    };
    if (cfg_.norm == NormKind::LayerNormPost) {
        Tensor h = norm(p + "norm1", x + drop(attn(x)));
        return norm(p + "norm2", h + drop(ffn(h)));
    }
    Tensor h = x + drop(attn(norm(p + "norm1", x)));
    return h + drop(ffn(norm(p + "norm2", h)));
}

SequenceModel::SsmInputs SequenceModel::ssm_inputs(int i, const Tensor& x) const {
    const auto p = layer_prefix("block", i);
    const Index di = cfg_.d_inner(), N = cfg_.n_state;
    const Tensor xn = rms_norm(x, param(p + "norm.g"));
    const Tensor proj = matmul(xn, param(p + "in_proj.w"));
    SsmInputs s;
    if (cfg_.mixer == Mixer::SsmSelective) {
        const Index r = cfg_.dt_rank();
        s.z = slice_cols(proj, di, di);
        s.u = silu(causal_conv1d(slice_cols(proj, 0, di), param(p + "conv.w"), param(p + "conv.b")));
        const Tensor dbc = matmul(s.u, param(p + "x_proj.w"));
        s.delta = softplus(add_row(matmul(slice_cols(dbc, 0, r), param(p + "dt_proj.w")), param(p + "dt_proj.b")));
        s.b = slice_cols(dbc, r, N);
        s.c = slice_cols(dbc, r + N, N);
        s.a = scale(exp(param(p + "A_log")), -1.0);
    } else {
        const Index H = cfg_.ssm_heads();
        s.z = slice_cols(proj, 0, di);
        const Tensor xbc =
            silu(causal_conv1d(slice_cols(proj, di, di + 2 * N), param(p + "conv.w"), param(p + "conv.b")));
        s.u = slice_cols(xbc, 0, di);
        s.b = slice_cols(xbc, di, N);
        s.c = slice_cols(xbc, di + N, N);
        const Tensor dt = softplus(add_row(slice_cols(proj, 2 * di + 2 * N, H), param(p + "dt_bias")));
        s.delta = gather_cols(dt, head_of_channel_);
        s.a = gather_cols(scale(exp(param(p + "A_log")), -1.0), state_cols_);
    }
    return s;
}

Tensor SequenceModel::ssm_block(int i, const Tensor& x, Rng* rng) const {
    const auto p = layer_prefix("block", i);
    const SsmInputs s = ssm_inputs(i, x);
    Tensor y = selective_scan(s.u, s.delta, s.a, s.b, s.c);
    if (cfg_.mixer == Mixer::SsmSelective) {
        y = mul(y + mul_row(s.u, param(p + "D")), silu(s.z));
    } else {
        const Tensor d_row = gather_cols(param(p + "D"), head_of_channel_);
        y = rms_norm(mul(y + mul_row(s.u, d_row), silu(s.z)), param(p + "gate_norm.g"));
    }
    Tensor out = matmul(y, param(p + "out_proj.w"));
    if (rng) out = dropout(out, cfg_.dropout, *rng);
    return x + out;
}

Tensor SequenceModel::forward(const TokenizedSequence& seq, Rng* rng) const {
    const auto L = static_cast<Index>(seq.size());
    if (L == 0) throw std::invalid_argument("forward on an empty sequence");
    Tensor h = embed(seq);
    if (cfg_.norm != NormKind::RMSNormPre) h = norm("emb.norm", h);
    if (rng) h = dropout(h, cfg_.dropout, *rng);

    std::unique_ptr<bool[]> mask;
    std::span<const bool> key_mask;
    if (seq.valid_length() < L) {
        mask = std::make_unique<bool[]>(static_cast<std::size_t>(L));
        for (Index i = 0; i < L; ++i) mask[static_cast<std::size_t>(i)] = seq.mask[static_cast<std::size_t>(i)];
        key_mask = {mask.get(), static_cast<std::size_t>(L)};
    }
    if (cfg_.is_ssm()) {
        for (int i = 0; i < cfg_.n_b; ++i) h = ssm_block(i, h, rng);
    } else {
        for (int i = 0; i < cfg_.n_m; ++i) h = transformer_layer(i, h, key_mask, rng);
    }
    if (cfg_.norm != NormKind::LayerNormPost) h = norm("final_norm", h);
    return h;
}

Tensor SequenceModel::forward_batch(const std::vector<TokenizedSequence>& batch, Rng* rng) const {
    std::vector<Tensor> hidden;
    hidden.reserve(batch.size());
    for (const auto& s : batch) hidden.push_back(forward(s, rng));
    return stack(hidden);
}

Tensor SequenceModel::logits(const Tensor& hidden) const {
    const Tensor& w = cfg_.tie_embeddings ? param("emb.concept") : param("lm_head.w");
    Tensor out = matmul_nt(hidden, w);
    return cfg_.head_bias ? add_row(out, param("lm_head.b")) : out;
}

ClassifierHead::ClassifierHead(int d_m, std::uint64_t seed) {
    Rng rng(seed);
    auto normal = [&](Shape shape) {
        Index n = 1;
        for (auto s : shape) n *= s;
        Eigen::VectorXd v(n);
        for (Index i = 0; i < n; ++i) v(i) = rng.normal(0.0, kInitSd);
        return Tensor::from(std::move(shape), std::move(v), true);
    };
    params_.push_back({"head.fc1.w", normal({d_m, d_m}), true});
    params_.push_back({"head.fc1.b", Tensor::zeros({d_m}, true), false});
    params_.push_back({"head.fc2.w", normal({d_m, 1}), true});
    params_.push_back({"head.fc2.b", Tensor::zeros({1}, true), false});
}

Tensor ClassifierHead::forward(const Tensor& state, Rng* rng, double p) const {
    Tensor h = gelu(add_row(matmul(state, params_[0].value), params_[1].value));
    if (rng) h = dropout(h, p, *rng);
    return add_row(matmul(h, params_[2].value), params_[3].value);
}

void ClassifierHead::zero() {
    for (auto& p : params_) p.value.mutable_data().setZero();
}

MaskedSequence mask_tokens(const TokenizedSequence& seq, int vocab_size, double mask_prob, Rng& rng) {
    MaskedSequence out{seq, std::vector<int>(seq.size(), -1), 0};
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const int id = seq.concept_ids[i];
        if (!seq.mask[i] || id < Vocabulary::kNumSpecials) continue;
        if (rng.uniform() >= mask_prob) continue;
        out.targets[i] = id;
        ++out.count;
        const double r = rng.uniform();
        if (r < 0.8) {
            out.input.concept_ids[i] = Vocabulary::kMask;
            out.input.type_ids[i] = static_cast<int>(TokenType::MASK);
        } else if (r < 0.9) {
            out.input.concept_ids[i] =
                Vocabulary::kNumSpecials + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - Vocabulary::kNumSpecials)));
        }
    }
    return out;
}

LossTerm mlm_term(const SequenceModel& m, const MaskedSequence& masked, Rng* dropout_rng) {
    const Tensor logits = m.logits(m.forward(masked.input, dropout_rng));
    return {cross_entropy_sum(logits, masked.targets), masked.count};
}

LossTerm ntp_term(const SequenceModel& m, const TokenizedSequence& seq, Rng* dropout_rng) {
    const TokenizedSequence trimmed = trim_padding(seq);
    const auto L = trimmed.size();
    if (L < 2) throw std::invalid_argument("next-token loss needs at least two tokens");
    std::vector<int> targets(L, -1);
    for (std::size_t i = 0; i + 1 < L; ++i) targets[i] = trimmed.concept_ids[i + 1];
    const Tensor logits = m.logits(m.forward(trimmed, dropout_rng));
    return {cross_entropy_sum(logits, targets), static_cast<int>(L - 1)};
}

Tensor mlm_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& batch, double mask_prob, Rng& rng) {
    std::vector<MaskedSequence> masked;
    int total = 0;
    for (const auto& s : batch) {
        masked.push_back(mask_tokens(s, m.config().vocab_size, mask_prob, rng));
        total += masked.back().count;
    }
    if (total == 0) throw std::invalid_argument("zero maskable tokens in batch");
    Tensor loss;
    for (const auto& ms : masked) {
        if (ms.count == 0) continue;
        const Tensor t = mlm_term(m, ms).sum;
        loss = loss.defined() ? loss + t : t;
    }
    return scale(loss, 1.0 / total);
}

Tensor ntp_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& batch) {
    Tensor loss;
    int total = 0;
    for (const auto& s : batch) {
        auto term = ntp_term(m, s);
        total += term.count;
        loss = loss.defined() ? loss + term.sum : term.sum;
    }
    if (!loss.defined()) throw std::invalid_argument("empty batch");
    return scale(loss, 1.0 / total);
}

Tensor classifier_logit(const SequenceModel& m, const ClassifierHead& head, const TokenizedSequence& seq,
                        Rng* dropout_rng) {
    const int n = seq.valid_length();
    if (n == 0) throw std::invalid_argument("all-PAD sequence");
    const Tensor hidden = m.forward(trim_padding(seq), dropout_rng);
    return head.forward(select_row(hidden, n - 1), dropout_rng, dropout_rng ? m.config().dropout : 0.0);
}

std::vector<double> classify(const SequenceModel& m, const ClassifierHead& head,
                             const std::vector<TokenizedSequence>& batch) {
    NoGradGuard guard;
    std::vector<double> out;
    out.reserve(batch.size());
    for (const auto& s : batch) out.push_back(sigmoid(classifier_logit(m, head, s).item()));
    return out;
}

SelectiveParams selective_params(const SequenceModel& m, int block, const Matrix& block_input) {
    if (!m.cfg_.is_ssm()) throw std::invalid_argument("selective parameters need an SSM config");
    if (block < 0 || block >= m.cfg_.n_b) throw std::out_of_range("block index");
    NoGradGuard guard;
    const auto s = m.ssm_inputs(block, Tensor::from(block_input));
    return {Matrix(s.delta.mat()), Matrix(s.b.mat()), Matrix(s.c.mat())};
}

}  // namespace ehrseq
