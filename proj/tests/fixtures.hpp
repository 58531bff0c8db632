#pragma once

#include <vector>

#include "ehrseq/random.hpp"
#include "ehrseq/sequence.hpp"

namespace ehrseq::test {

/// Random but well-formed index streams of `valid` tokens padded to `length`.
inline TokenizedSequence random_sequence(int vocab_size, int valid, int length, std::uint64_t seed) {
    Rng rng(seed);
    TokenizedSequence s;
    s.patient_id = "P" + std::to_string(seed);
    for (int i = 0; i < length; ++i) {
        const bool on = i < valid;
        auto pick = [&](int rows) { return on ? 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(rows - 1))) : 0; };
        int cid = 0;
        if (on) cid = i == 0 ? Vocabulary::kCls : static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - 4))) + 4;
        s.concept_ids.push_back(cid);
        s.type_ids.push_back(pick(kTypeRows));
        s.age_ids.push_back(pick(kAgeRows));
        s.sex_ids.push_back(pick(kSexRows));
        s.bmi_ids.push_back(pick(kBmiRows));
        s.time_week_ids.push_back(pick(kTimeRows));
        s.visit_ids.push_back(pick(kVisitRows));
        s.segment_ids.push_back(on ? static_cast<int>(rng.below(2)) : 0);
        s.position_ids.push_back(i);
        s.mask.push_back(on);
    }
    return s;
}

}  // namespace ehrseq::test
