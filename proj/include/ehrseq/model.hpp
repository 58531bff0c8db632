#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ehrseq/autodiff.hpp"
#include "ehrseq/random.hpp"
#include "ehrseq/sequence.hpp"
#include "json.hpp"

namespace ehrseq {

enum class Mixer { AttentionBidirectional, AttentionCausal, SsmSelective, SsmScalarA };
enum class Objective { MLM, NTP };
enum class PosEncoding { Absolute, RoPE, None };
enum class NormKind { LayerNormPost, LayerNormPre, RMSNormPre };
enum class Activation { GeLU, GeGLU, SwiGLU, SiLU };

enum class Preset { BERT, MBERT_lite, LLAMA, MAMBA, MAMBA2 };
enum class Size { Tiny, Small, Medium, DeskTiny };

inline constexpr Preset kAllPresets[] = {Preset::BERT, Preset::MBERT_lite, Preset::LLAMA, Preset::MAMBA,
                                         Preset::MAMBA2};

std::string_view to_string(Preset p);
std::string_view to_string(Size s);
Preset parse_preset(std::string_view s);
Size parse_size(std::string_view s);

struct ModelConfig {
    Mixer mixer{Mixer::AttentionBidirectional};
    Objective objective{Objective::MLM};
    PosEncoding pos{PosEncoding::Absolute};
    NormKind norm{NormKind::LayerNormPost};
    Activation act{Activation::GeLU};
    int d_m{64};
    int d_f{128};
    int n_m{2};  // transformer layers
    int n_h{2};
    int n_b{2};  // SSM blocks
    int n_state{16};
    int d_conv{4};
    int expand{2};
    int d_p{32};  // scalar-A head dimension
    int context_length{512};
    int vocab_size{0};
    double dropout{0.1};
    bool linear_bias{false};  // attention/FFN projections
    bool tie_embeddings{false};
    bool head_bias{false};
    double rope_base{10000.0};

    bool is_ssm() const { return mixer == Mixer::SsmSelective || mixer == Mixer::SsmScalarA; }
    bool is_causal() const { return mixer != Mixer::AttentionBidirectional; }
    int d_inner() const { return expand * d_m; }
    int dt_rank() const { return (d_m + 15) / 16; }
    int ssm_heads() const { return d_inner() / d_p; }
};

/// Throws std::invalid_argument when the config breaks an invariant.
void validate(const ModelConfig& cfg);

ModelConfig preset(Preset name, Size size, int vocab_size, int context_length);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Parameter {
    std::string name;
    Tensor value;
    bool decay{true};  // false for biases and norm gains
};

using ParameterList = std::vector<Parameter>;

std::int64_t count_parameters(const ParameterList& params);

/// Per-token selective parameters of SSM block `block`: softplus step
/// sizes [L, d_inner] and input/output projections B, C [L, n_state].
struct SelectiveParams {
    Matrix delta, b, c;
};

/// Embedding stack, mixer blocks and the language-model head.
class SequenceModel {
public:
    SequenceModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    void set_dropout(double p);
    ParameterList& parameters() { return params_; }
    const ParameterList& parameters() const { return params_; }
    std::int64_t count_parameters() const { return ehrseq::count_parameters(params_); }

    /// Hidden states [L, d_m] over all L positions of `seq` (PAD keys are
    /// masked). Dropout is applied only when `rng` is given.
    Tensor forward(const TokenizedSequence& seq, Rng* rng = nullptr) const;
    /// Hidden states [B, L, d_m] for equal-length sequences.
    Tensor forward_batch(const std::vector<TokenizedSequence>& batch, Rng* rng = nullptr) const;
    /// Vocabulary logits [L, V] from hidden states.
    Tensor logits(const Tensor& hidden) const;

private:
    friend SelectiveParams selective_params(const SequenceModel&, int, const Matrix&);
    struct SsmInputs {
        Tensor u, z, delta, a, b, c;
    };

    const Tensor& param(const std::string& name) const;
    Tensor add_param(const std::string& name, Shape shape, double init_sd, bool decay, Rng& rng);
    Tensor add_const(const std::string& name, Shape shape, double value, bool decay);
    Tensor embed(const TokenizedSequence& seq) const;
    Tensor norm(const std::string& prefix, const Tensor& x) const;
    Tensor transformer_layer(int i, const Tensor& x, std::span<const bool> key_mask, Rng* rng) const;
    SsmInputs ssm_inputs(int i, const Tensor& x) const;
    Tensor ssm_block(int i, const Tensor& x, Rng* rng) const;
    Tensor linear(const std::string& name, const Tensor& x, bool bias) const;

    ModelConfig cfg_;
    ParameterList params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<int> head_of_channel_;
    std::vector<int> state_cols_;
};

/// Two dense layers with a GeLU between, ending in one logit.
class ClassifierHead {
public:
    ClassifierHead(int d_m, std::uint64_t seed);

    ParameterList& parameters() { return params_; }
    const ParameterList& parameters() const { return params_; }
    /// Logit [1, 1] from one hidden state row [1, d_m].
    Tensor forward(const Tensor& state, Rng* rng = nullptr, double dropout = 0.0) const;
    /// Sets every weight and bias to zero.
    void zero();

private:
    ParameterList params_;
};

/// Masked copy of a sequence and its MLM targets (-1 where not predicted).
struct MaskedSequence {
    TokenizedSequence input;
    std::vector<int> targets;
    int count{0};
};

/// BERT-style corruption of non-special tokens: with probability `mask_prob`
/// a position is selected, then replaced by [MASK] (80%), a random concept
/// (10%) or kept (10%).
MaskedSequence mask_tokens(const TokenizedSequence& seq, int vocab_size, double mask_prob, Rng& rng);

/// Summed cross-entropy and the number of predicted positions.
struct LossTerm {
    Tensor sum;
    int count{0};
};

LossTerm mlm_term(const SequenceModel& m, const MaskedSequence& masked, Rng* dropout_rng = nullptr);
LossTerm ntp_term(const SequenceModel& m, const TokenizedSequence& seq, Rng* dropout_rng = nullptr);

/// Mean cross-entropy over all corrupted positions in the batch.
Tensor mlm_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& batch, double mask_prob, Rng& rng);
/// Mean shifted cross-entropy over non-PAD targets.
Tensor ntp_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& batch);

/// Classifier logit from the rightmost non-PAD hidden state.
Tensor classifier_logit(const SequenceModel& m, const ClassifierHead& head, const TokenizedSequence& seq,
                        Rng* dropout_rng = nullptr);
std::vector<double> classify(const SequenceModel& m, const ClassifierHead& head,
                             const std::vector<TokenizedSequence>& batch);

SelectiveParams selective_params(const SequenceModel& m, int block, const Matrix& block_input);

}  // namespace ehrseq
