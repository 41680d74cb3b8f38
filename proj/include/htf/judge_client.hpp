#pragma once

#include <memory>
#include <string>

#include <json.hpp>

#include "htf/common.hpp"

namespace htf::judge {

// Wire contract for an external response-quality judge. The shipped scorer
// is the deterministic token-F1 in the harness; this interface exists so a
// remote 1-5 judge can be swapped in without touching the metrics plumbing.

struct JudgeRequest {
    std::string question;
    std::string answer;
};

struct JudgeResponse {
    int answer_correctness_score = 0;   // 1-5
    int clarity_readability_score = 0;  // 1-5
    int text_quality_score = 0;         // 1-5
};

inline void to_json(nlohmann::json& j, const JudgeRequest& r) {
    j = nlohmann::json{{"question", r.question}, {"answer", r.answer}};
}

inline void from_json(const nlohmann::json& j, JudgeRequest& r) {
    r.question = j.at("question").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
}

inline void to_json(nlohmann::json& j, const JudgeResponse& r) {
    j = nlohmann::json{{"answer_correctness_score", r.answer_correctness_score},
                       {"clarity_readability_score", r.clarity_readability_score},
                       {"text_quality_score", r.text_quality_score}};
}

inline void from_json(const nlohmann::json& j, JudgeResponse& r) {
    r.answer_correctness_score = j.at("answer_correctness_score").get<int>();
    r.clarity_readability_score = j.at("clarity_readability_score").get<int>();
    r.text_quality_score = j.at("text_quality_score").get<int>();
    for (int v : {r.answer_correctness_score, r.clarity_readability_score, r.text_quality_score})
        if (v < 1 || v > 5)
            throw ConfigError("JudgeResponse: score " + std::to_string(v) + " outside the 1-5 scale");
}

class JudgeClient {
  public:
    virtual ~JudgeClient() = default;
    virtual JudgeResponse score(const JudgeRequest& request) = 0;
};

// Stand-in that returns a fixed neutral verdict; keeps pipelines hermetic.
class StubJudge final : public JudgeClient {
  public:
    explicit StubJudge(int fixed = 3) : fixed_(fixed) {}
    JudgeResponse score(const JudgeRequest&) override { return JudgeResponse{fixed_, fixed_, fixed_}; }

  private:
    int fixed_;
};

inline std::unique_ptr<JudgeClient> make_stub_judge() { return std::make_unique<StubJudge>(); }

}  // namespace htf::judge
